"""Compression passes: magnitude pruning, 8-bit quantization, low-rank and TT conversion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from . import linalg
from . import tt as ttm
from .errors import CompatibilityError, NumericError, RankError
from .model import (
    GATES,
    LmModel,
    LowRankLstmLayer,
    TTLstmLayer,
    count_params,
    model_size_bytes,
    perplexity,
)

PRUNE_GROUPS = ("embedding", "recurrent", "output")


# ---------------------------------------------------------------------------
# pruning


@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]
    sparsity: float

    def achieved(self) -> dict[str, float]:
        return {k: 1.0 - float(m.mean()) for k, m in self.masks.items()}

    def apply(self, model: LmModel) -> LmModel:
        params = model.named_params()
        for name, mask in self.masks.items():
            params[name] *= mask
        return model


def prune(tensor, sparsity: float):
    """Zero the ``floor(sparsity * size)`` smallest-magnitude entries.

    Among equal magnitudes, later entries are removed first. Returns
    ``(pruned copy, 0/1 mask)``.
    """
    if not 0.0 < sparsity < 1.0:
        raise ValueError(f"sparsity must lie in (0, 1), got {sparsity}")
    w = np.asarray(tensor, dtype=np.float64)
    flat = w.reshape(-1)
    n_zero = int(math.floor(sparsity * flat.size))
    order = np.lexsort((-np.arange(flat.size), np.abs(flat)))
    mask = np.ones(flat.size)
    mask[order[:n_zero]] = 0.0
    mask = mask.reshape(w.shape)
    return w * mask, mask


def prune_targets(model: LmModel, selection: Iterable[str]) -> list[str]:
    selection = set(selection)
    if not selection:
        raise ValueError("empty prune selection")
    unknown = selection - set(PRUNE_GROUPS)
    if unknown:
        raise ValueError(f"unknown prune groups {sorted(unknown)}; choose from {PRUNE_GROUPS}")
    names = []
    for name, arr in model.named_params().items():
        if arr.ndim < 2:
            continue  # biases stay dense
        group = "embedding" if name == "embedding" else "output" if name == "softmax.W" else "recurrent"
        if group in selection:
            names.append(name)
    return names


def prune_model(model: LmModel, sparsity: float, selection=("output",)):
    """Per-tensor magnitude pruning of the selected groups; returns ``(new model, PruneMask)``."""
    names = prune_targets(model, selection)
    out = model.copy()
    out.quantized = {}
    params = out.named_params()
    masks = {}
    for name in names:
        pruned, mask = prune(params[name], sparsity)
        params[name][...] = pruned
        masks[name] = mask
    return out, PruneMask(masks, sparsity)


def nonzeros(model: LmModel) -> dict[str, int]:
    return {name: int(np.count_nonzero(a)) for name, a in model.named_params().items()}


# ---------------------------------------------------------------------------
# quantization


@dataclass
class QuantizedTensor:
    shape: tuple[int, ...]
    codes: np.ndarray  # uint8
    min: np.float32
    scale: np.float32

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.codes = np.asarray(self.codes, dtype=np.uint8).reshape(self.shape)
        self.min = np.float32(self.min)
        self.scale = np.float32(self.scale)

    def __eq__(self, other):
        return (
            isinstance(other, QuantizedTensor)
            and self.shape == other.shape
            and np.array_equal(self.codes, other.codes)
            and self.min.tobytes() == other.min.tobytes()
            and self.scale.tobytes() == other.scale.tobytes()
        )


def quantize(tensor) -> QuantizedTensor:
    """Map each value to the nearest of 256 evenly spaced levels spanning ``[min, max]``."""
    x = np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("cannot quantize a tensor with non-finite entries")
    lo = np.float32(x.min()) + np.float32(0.0)  # no signed zero
    hi = np.float32(x.max())
    scale = np.float32((np.float64(hi) - np.float64(lo)) / 255.0)
    if scale == 0:
        return QuantizedTensor(x.shape, np.zeros(x.shape, np.uint8), lo, np.float32(0.0))
    codes = np.rint((x - np.float64(lo)) / np.float64(scale))
    return QuantizedTensor(x.shape, np.clip(codes, 0, 255).astype(np.uint8), lo, scale)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """``min + code * scale`` evaluated in float32."""
    return q.min + q.codes.astype(np.float32) * q.scale


def quantize_model(model: LmModel) -> LmModel:
    """Quantize every weight tensor (biases excluded); weights hold the dequantized values."""
    out = model.copy()
    params = out.named_params()
    out.quantized = {}
    for name, arr in params.items():
        if arr.ndim < 2:
            continue
        q = quantize(arr)
        out.quantized[name] = q
        arr[...] = dequantize(q).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# low-rank conversion


def lowrank_factorize(model: LmModel, rank: int) -> LmModel:
    """SVD-initialised low-rank copy of a dense LSTM model.

    Each layer's stacked recurrent matrix ``[V_i; V_f; V_c; V_o]`` is split
    into ``Ua`` (4k x r) and the projection ``Ub`` (r x k). The next layer's
    input matrices, and the softmax head after the last layer, are projected
    onto that same ``Ub``; the first layer's input matrices are factored on
    their own and the embedding absorbs the right factor.
    """
    cfg = model.config
    if cfg.layer_kind != "dense-lstm":
        raise ValueError(f"low-rank conversion needs a dense-lstm model, got {cfg.layer_kind}")
    k = cfg.hidden
    if not isinstance(rank, (int, np.integer)) or not 1 <= rank <= k:
        raise RankError(f"rank {rank} outside [1, {k}]")
    if cfg.n_layers < 1:
        raise ValueError("low-rank conversion needs at least one recurrent layer")
    if rank > cfg.embed_dim:
        raise RankError(f"rank {rank} exceeds embedding width {cfg.embed_dim}")
    layers = []
    embedding = model.embedding
    prev_ub = None
    for l, layer in enumerate(model.layers):
        Wcat = np.concatenate([getattr(layer, "W_" + g) for g in GATES])
        Vcat = np.concatenate([getattr(layer, "V_" + g) for g in GATES])
        if prev_ub is None:
            inp = linalg.truncated_svd(Wcat, rank)
            Wa = inp.U * inp.S
            embedding = embedding @ inp.V
        else:
            Wa = Wcat @ prev_ub.T
        rec = linalg.truncated_svd(Vcat, rank)
        Ua = rec.U * rec.S
        Ub = rec.V.T.copy()
        mats = {}
        for n, g in enumerate(GATES):
            mats["Wa_" + g] = Wa[n * k : (n + 1) * k].copy()
            mats["Ua_" + g] = Ua[n * k : (n + 1) * k].copy()
            mats["b_" + g] = getattr(layer, "b_" + g).copy()
        layers.append(LowRankLstmLayer(Ub, Wb=prev_ub, **mats))
        prev_ub = Ub
    softmax_w = model.softmax_w @ prev_ub.T
    new_cfg = replace(cfg, layer_kind="lowrank-lstm", rank=int(rank))
    return LmModel(new_cfg, model.vocab, np.ascontiguousarray(embedding), layers,
                   softmax_w, model.softmax_b.copy())


# ---------------------------------------------------------------------------
# TT conversion


def tt_compress(model: LmModel, d: int = 4, max_ranks=None, eps: Optional[float] = None) -> LmModel:
    """Replace each gate matrix of a dense LSTM with its TT-SVD approximation."""
    cfg = model.config
    if cfg.layer_kind != "dense-lstm":
        raise ValueError(f"TT conversion needs a dense-lstm model, got {cfg.layer_kind}")
    layers = []
    for layer in model.layers:
        mats = {}
        for g in GATES:
            for p in ("W_", "V_"):
                mats[p + g] = ttm.tt_from_dense(getattr(layer, p + g), ttm.TTConfig(d, max_ranks=max_ranks, eps=eps))
            mats["b_" + g] = getattr(layer, "b_" + g).copy()
        layers.append(TTLstmLayer(**mats))
    cap = None
    if max_ranks is not None:
        cap = int(max_ranks) if np.isscalar(max_ranks) else tuple(int(r) for r in max_ranks)
    new_cfg = replace(cfg, layer_kind="tt-lstm", tt_dims=d, tt_ranks=cap)
    return LmModel(new_cfg, model.vocab, model.embedding.copy(), layers,
                   model.softmax_w.copy(), model.softmax_b.copy())


# ---------------------------------------------------------------------------
# reporting


@dataclass
class CompressionReport:
    before_params: int
    after_params: int
    before_bytes: int
    after_bytes: int
    ratio: float
    before_pp: Optional[float]
    after_pp: Optional[float]
    before_nonzeros: int = 0
    after_nonzeros: int = 0
    tensor_nonzeros: dict[str, int] = field(default_factory=dict)

    def text(self) -> str:
        lines = []
        for key, val in asdict(self).items():
            if key == "tensor_nonzeros":
                continue
            if isinstance(val, float):
                val = f"{val:.3f}" if key.endswith("_pp") else f"{val:.4f}"
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def check_compatible(a: LmModel, b: LmModel):
    if a.n_vocab != b.n_vocab or (a.vocab is not None and b.vocab is not None and a.vocab != b.vocab):
        raise CompatibilityError("models were built on different vocabularies")


def compression_report(before: LmModel, after: LmModel, eval_stream=None,
                       batch_size: int = 1, unroll: int = 35) -> CompressionReport:
    check_compatible(before, after)
    before_bytes = model_size_bytes(before)
    after_bytes = model_size_bytes(after)
    if eval_stream is not None:
        before_pp = perplexity(before, eval_stream, batch_size, unroll)
        after_pp = perplexity(after, eval_stream, batch_size, unroll)
    else:
        before_pp = after_pp = None
    nz_before = nonzeros(before)
    nz_after = nonzeros(after)
    return CompressionReport(
        before_params=count_params(before),
        after_params=count_params(after),
        before_bytes=before_bytes,
        after_bytes=after_bytes,
        ratio=before_bytes / after_bytes,
        before_pp=before_pp,
        after_pp=after_pp,
        before_nonzeros=sum(nz_before.values()),
        after_nonzeros=sum(nz_after.values()),
        tensor_nonzeros=nz_after,
    )
