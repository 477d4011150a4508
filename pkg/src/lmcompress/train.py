"""Truncated-BPTT training with Adam, plus a finite-difference gradient checker."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import batchify
from .errors import DivergenceError, NumericError, ShapeError
from .model import LmModel, LmState, backward, batch_nll, exp_or_inf, forward_cached, perplexity, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    batch_size: int = 20
    unroll: int = 35
    epochs: int = 10
    seed: int = 0
    eval_batch_size: Optional[int] = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.clip <= 0:
            raise ValueError("clip norm must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def cross_entropy_loss(logits, targets) -> float:
    """Mean negative log-likelihood of ``targets`` (B x N) under ``logits`` (B x N x V)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 3 or logits.shape[:2] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    return float(batch_nll(logits, targets).mean())


def bptt_gradients(model: LmModel, inputs, targets, state: Optional[LmState] = None, step: int = 0):
    """Loss and exact gradients for one batch, unrolled over its N steps.

    Returns ``(loss, grads, final_state)``; no gradient flows into ``state``.
    """
    targets = np.asarray(targets)
    logits, new_state, cache = forward_cached(model, inputs, state)
    if logits.shape[:2] != targets.shape:
        raise ShapeError(f"inputs {np.shape(inputs)} and targets {targets.shape} differ")
    loss = float(batch_nll(logits, targets).mean())
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at step {step}", step=step)
    B, N = targets.shape
    d = softmax(logits)
    d[np.arange(B)[:, None], np.arange(N)[None, :], targets] -= 1.0
    d /= B * N
    grads = backward(model, cache, d)
    return loss, grads, new_state


def clip_by_global_norm(grads: dict[str, np.ndarray], clip: float) -> float:
    """Scale ``grads`` in place so their joint norm is at most ``clip``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > clip:
        for g in grads.values():
            g *= clip / norm
    return norm


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """Clip, then apply one bias-corrected Adam update to ``params`` in place."""
    clip_by_global_norm(grads, config.clip)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    train_pp: float
    valid_pp: float
    seconds: float

    def line(self) -> str:
        return f"epoch={self.epoch} train_pp={self.train_pp:.3f} valid_pp={self.valid_pp:.3f} seconds={self.seconds:.3f}"


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [e.line() for e in self.epochs]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    @property
    def final_valid_pp(self) -> float:
        return self.epochs[-1].valid_pp


def apply_masks(params, masks):
    for name, mask in masks.items():
        params[name] *= mask


def train(
    model: LmModel,
    train_stream,
    valid_stream,
    config: TrainConfig,
    masks: Optional[dict[str, np.ndarray]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainReport:
    """Train ``model`` in place.

    ``masks`` maps parameter names to 0/1 arrays; masked entries are zeroed
    before training and stay exactly zero after every update. Batches are
    visited in corpus order, so runs are reproducible without any RNG.
    """
    params = model.named_params()
    masks = masks or {}
    for name, mask in masks.items():
        if name not in params or params[name].shape != mask.shape:
            raise ShapeError(f"mask {name} does not match any parameter")
    model.quantized = {}
    apply_masks(params, masks)
    adam = AdamState.zeros_like(params)
    plan = batchify(train_stream, config.batch_size, config.unroll)
    eval_b = config.eval_batch_size or config.batch_size
    report = TrainReport()
    initial = None
    bad_epochs = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        state = model.zero_state(config.batch_size)
        total = 0.0
        for inputs, targets in plan:
            step += 1
            loss, grads, state = bptt_gradients(model, inputs, targets, state, step=step)
            if initial is None:
                initial = loss
            for name, mask in masks.items():
                grads[name] *= mask
            adam_step(params, grads, adam, config)
            apply_masks(params, masks)
            total += loss
        mean_loss = total / len(plan)
        valid_pp = perplexity(model, valid_stream, eval_b, config.unroll)
        rec = EpochRecord(epoch, exp_or_inf(mean_loss), valid_pp, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        bad_epochs = bad_epochs + 1 if mean_loss > 3.0 * initial else 0
        if bad_epochs >= 3:
            raise DivergenceError(
                f"training loss {mean_loss:.3f} above 3x initial {initial:.3f} for 3 epochs", step=step
            )
    return report


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[tuple[str, tuple[int, ...]]]
    checked: int


def grad_check(model: LmModel, inputs, targets, tolerance: float = 1e-4, h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare BPTT gradients with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``max_coords`` samples that many coordinates per tensor; default is all.
    """
    _, grads, _ = bptt_gradients(model, inputs, targets)
    targets = np.asarray(targets)

    def loss():
        logits, _, _ = forward_cached(model, inputs, keep_cache=False)
        return float(batch_nll(logits, targets).mean())

    rng = np.random.default_rng(seed)
    worst, where, checked = 0.0, None, 0
    for name, p in model.named_params().items():
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            num = (up - down) / (2 * h)
            ana = float(grads[name][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            checked += 1
            if err > worst:
                worst, where = err, (name, idx)
    if worst >= tolerance:
        log.warning("gradient check: max relative error %.3e at %s", worst, where)
    return GradCheckReport(worst, where, checked)
