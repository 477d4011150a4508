"""Word-level recurrent language model: embedding, stacked recurrent layers, softmax head.

Four layer kinds share one interface:

``dense-rnn``     ``x_t = tanh(W x_in + V x_{t-1} + b)``
``dense-lstm``    standard LSTM with eight gate matrices and four biases
``lowrank-lstm``  every gate matrix factored through an ``r``-wide projection;
                  a layer emits ``m_t = U^b x_t``, which feeds both its own
                  recurrence and the next layer (or the softmax head)
``tt-lstm``       the eight gate matrices stored as TT matrices

Sequences are laid out time-major inside the layers, ``(N, B, width)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tt as ttm
from .data import Vocabulary, batchify
from .errors import ShapeError, VocabError

GATES = ("i", "f", "c", "o")
LAYER_KINDS = ("dense-rnn", "dense-lstm", "lowrank-lstm", "tt-lstm")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden: int
    embed_dim: int
    n_vocab: int
    layer_kind: str = "dense-lstm"
    rank: Optional[int] = None
    tt_dims: Optional[int] = None
    tt_ranks: Optional[int | tuple[int, ...]] = None
    unroll: int = 35
    init_scale: float = 0.08

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")
        if self.n_layers < 0 or self.hidden < 1 or self.embed_dim < 1 or self.n_vocab < 1:
            raise ValueError(f"invalid model dimensions in {self}")
        if self.layer_kind == "lowrank-lstm":
            if self.rank is None or not 1 <= self.rank <= self.hidden:
                raise ValueError(f"low-rank layers need 1 <= rank <= hidden, got {self.rank}")
        if self.layer_kind == "tt-lstm" and (self.tt_dims is None or self.tt_dims < 2):
            raise ValueError("tt-lstm layers need tt_dims >= 2")

    @property
    def input_width(self) -> int:
        """Width of the embedding output."""
        return self.rank if self.layer_kind == "lowrank-lstm" else self.embed_dim

    @property
    def output_width(self) -> int:
        """Width consumed by the softmax head."""
        if self.n_layers == 0:
            return self.input_width
        return self.rank if self.layer_kind == "lowrank-lstm" else self.hidden


@dataclass
class LayerState:
    h: np.ndarray
    c: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None

    def copy(self):
        return LayerState(
            self.h.copy(),
            None if self.c is None else self.c.copy(),
            None if self.m is None else self.m.copy(),
        )


@dataclass
class LmState:
    layers: list[LayerState]

    def copy(self):
        return LmState([s.copy() for s in self.layers])


# ---------------------------------------------------------------------------
# layers


class DenseRnnLayer:
    kind = "dense-rnn"

    def __init__(self, W, V, b):
        self.W, self.V, self.b = W, V, b

    @classmethod
    def init(cls, rng, k, n_in, scale):
        u = lambda *s: rng.uniform(-scale, scale, s)
        return cls(u(k, n_in), u(k, k), u(k))

    @property
    def hidden(self):
        return self.V.shape[0]

    @property
    def in_width(self):
        return self.W.shape[1]

    out_width = hidden

    def params(self):
        return {"W": self.W, "V": self.V, "b": self.b}

    def zero_state(self, B):
        return LayerState(np.zeros((B, self.hidden)))

    def forward_seq(self, X, state, keep_cache=False):
        _check_width(X, self.in_width)
        N, B, _ = X.shape
        H = np.empty((N + 1, B, self.hidden))
        H[0] = state.h
        ZX = X @ self.W.T + self.b
        for t in range(N):
            H[t + 1] = np.tanh(ZX[t] + H[t] @ self.V.T)
        cache = (X, H) if keep_cache else None
        return H[1:].copy(), LayerState(H[N].copy()), cache

    def backward_seq(self, cache, dOut):
        X, H = cache
        N = X.shape[0]
        dZ = np.empty_like(dOut)
        dh_next = np.zeros_like(dOut[0])
        for t in reversed(range(N)):
            dh = dOut[t] + dh_next
            dZ[t] = dh * (1.0 - H[t + 1] ** 2)
            dh_next = dZ[t] @ self.V
        flat = dZ.reshape(-1, dZ.shape[-1])
        grads = {
            "W": flat.T @ X.reshape(-1, X.shape[-1]),
            "V": flat.T @ H[:-1].reshape(-1, H.shape[-1]),
            "b": flat.sum(axis=0),
        }
        return dZ @ self.W, grads


class _LstmBase:
    """Shared LSTM recurrence; subclasses supply the gate pre-activations.

    Hooks:
      ``_input_pre(X2d)``/``_input_back`` for the input contributions of all
      timesteps at once, ``_rec_pre(v)``/``_rec_back`` for the recurrent
      contribution of one step, ``_project(h)``/``_project_back`` for the
      vector ``v`` a step emits (``h`` itself, or ``m = U^b h``).
    """

    hidden: int
    in_width: int
    out_width: int

    def zero_state(self, B):
        st = LayerState(np.zeros((B, self.hidden)), np.zeros((B, self.hidden)))
        if self.kind == "lowrank-lstm":
            st.m = np.zeros((B, self.out_width))
        return st

    def _bias(self):
        return np.concatenate([getattr(self, "b_" + g) for g in GATES])

    def _project(self, h):
        return h, None

    def _project_back(self, cache, dv, grads):
        return dv

    def _recurrent_input(self, state):
        return state.h if state.m is None else state.m

    def forward_seq(self, X, state, keep_cache=False):
        _check_width(X, self.in_width)
        N, B, _ = X.shape
        k = self.hidden
        zx, in_cache = self._input_pre(X.reshape(N * B, -1))
        zx = (zx + self._bias()).reshape(N, B, 4 * k)
        v = self._recurrent_input(state)
        c = state.c
        out = np.empty((N, B, self.out_width))
        if keep_cache:
            acts = np.empty((N, B, 4 * k))
            Cs = np.empty((N + 1, B, k))
            Cs[0] = c
            Vs, Hs = [v], []
            rec_caches, proj_caches = [], []
        for t in range(N):
            zr, rc = self._rec_pre(v)
            z = zx[t] + zr
            i = sigmoid(z[:, :k])
            f = sigmoid(z[:, k : 2 * k])
            g = np.tanh(z[:, 2 * k : 3 * k])
            o = sigmoid(z[:, 3 * k :])
            c = f * c + i * g
            h = o * np.tanh(c)
            v, pc = self._project(h)
            out[t] = v
            if keep_cache:
                acts[t, :, :k], acts[t, :, k : 2 * k] = i, f
                acts[t, :, 2 * k : 3 * k], acts[t, :, 3 * k :] = g, o
                Cs[t + 1] = c
                Vs.append(v)
                Hs.append(h)
                rec_caches.append(rc)
                proj_caches.append(pc)
        new = LayerState(h.copy() if N else state.h.copy(), c.copy())
        if state.m is not None:
            new.m = v.copy()
        cache = None
        if keep_cache:
            cache = (X.shape, in_cache, acts, Cs, Vs, Hs, rec_caches, proj_caches)
        return out, new, cache

    def backward_seq(self, cache, dOut):
        Xshape, in_cache, acts, Cs, Vs, Hs, rec_caches, proj_caches = cache
        N, B, _ = Xshape
        k = self.hidden
        grads = {}
        dZ = np.empty((N, B, 4 * k))
        dv_next = np.zeros((B, self.out_width))
        dc_next = np.zeros((B, k))
        for t in reversed(range(N)):
            dv = dOut[t] + dv_next
            dh = self._project_back(proj_caches[t], dv, grads)
            i, f = acts[t, :, :k], acts[t, :, k : 2 * k]
            g, o = acts[t, :, 2 * k : 3 * k], acts[t, :, 3 * k :]
            tc = np.tanh(Cs[t + 1])
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:, :k] = dc * g * i * (1.0 - i)
            dz[:, k : 2 * k] = dc * Cs[t] * f * (1.0 - f)
            dz[:, 2 * k : 3 * k] = dc * i * (1.0 - g * g)
            dz[:, 3 * k :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dv_next = self._rec_back(rec_caches[t], dz, grads)
        flat = dZ.reshape(N * B, 4 * k)
        db = flat.sum(axis=0)
        for n, g in enumerate(GATES):
            grads["b_" + g] = db[n * k : (n + 1) * k].copy()
        dX = self._input_back(in_cache, flat, grads)
        return dX.reshape(N, B, -1), grads


class DenseLstmLayer(_LstmBase):
    kind = "dense-lstm"

    def __init__(self, **mats):
        for g in GATES:
            for p in ("W_", "V_", "b_"):
                setattr(self, p + g, mats[p + g])

    @classmethod
    def init(cls, rng, k, n_in, scale):
        mats = {}
        for g in GATES:
            mats["W_" + g] = rng.uniform(-scale, scale, (k, n_in))
            mats["V_" + g] = rng.uniform(-scale, scale, (k, k))
            mats["b_" + g] = rng.uniform(-scale, scale, k)
        return cls(**mats)

    @property
    def hidden(self):
        return self.V_i.shape[0]

    @property
    def in_width(self):
        return self.W_i.shape[1]

    @property
    def out_width(self):
        return self.hidden

    def params(self):
        return {p + g: getattr(self, p + g) for p in ("W_", "V_") for g in GATES} | {
            "b_" + g: getattr(self, "b_" + g) for g in GATES
        }

    def _stack(self, p):
        return np.concatenate([getattr(self, p + g) for g in GATES], axis=0)

    def _input_pre(self, X2):
        W = self._stack("W_")
        return X2 @ W.T, (X2, W)

    def _input_back(self, cache, dZ, grads):
        X2, W = cache
        dW = dZ.T @ X2
        k = self.hidden
        for n, g in enumerate(GATES):
            grads["W_" + g] = dW[n * k : (n + 1) * k]
        return dZ @ W

    def _rec_pre(self, v):
        V = getattr(self, "_Vcat", None)
        if V is None:
            V = self._stack("V_")
        return v @ V.T, (v, V)

    def _rec_back(self, cache, dz, grads):
        v, V = cache
        dV = dz.T @ v
        k = self.hidden
        for n, g in enumerate(GATES):
            key = "V_" + g
            if key in grads:
                grads[key] += dV[n * k : (n + 1) * k]
            else:
                grads[key] = dV[n * k : (n + 1) * k].copy()
        return dz @ V

    def forward_seq(self, X, state, keep_cache=False):
        self._Vcat = self._stack("V_")
        try:
            return super().forward_seq(X, state, keep_cache)
        finally:
            self._Vcat = None


class LowRankLstmLayer(_LstmBase):
    """LSTM layer whose gates read ``r``-wide projected vectors.

    ``Wa_g`` (k x r) reads the incoming projection ``m_{l-1}``, ``Ua_g`` (k x r)
    reads the layer's own previous projection ``m_l``, and ``Ub`` (r x k) makes
    ``m_l = Ub x_l``. ``Wb`` is the projection that produced this layer's
    input: the previous layer's ``Ub`` object itself (``None`` for the first
    layer, whose input is the ``r``-wide embedding).
    """

    kind = "lowrank-lstm"

    def __init__(self, Ub, Wb=None, **mats):
        self.Ub = Ub
        self.Wb = Wb
        for g in GATES:
            for p in ("Wa_", "Ua_", "b_"):
                setattr(self, p + g, mats[p + g])

    @classmethod
    def init(cls, rng, k, r, scale, Wb=None):
        mats = {}
        for g in GATES:
            mats["Wa_" + g] = rng.uniform(-scale, scale, (k, r))
            mats["Ua_" + g] = rng.uniform(-scale, scale, (k, r))
            mats["b_" + g] = rng.uniform(-scale, scale, k)
        return cls(rng.uniform(-scale, scale, (r, k)), Wb=Wb, **mats)

    @property
    def hidden(self):
        return self.Ub.shape[1]

    @property
    def rank(self):
        return self.Ub.shape[0]

    @property
    def in_width(self):
        return self.Wa_i.shape[1]

    @property
    def out_width(self):
        return self.rank

    def params(self):
        out = {p + g: getattr(self, p + g) for p in ("Wa_", "Ua_") for g in GATES}
        out["Ub"] = self.Ub
        out.update({"b_" + g: getattr(self, "b_" + g) for g in GATES})
        return out

    def _stack(self, p):
        return np.concatenate([getattr(self, p + g) for g in GATES], axis=0)

    def _input_pre(self, X2):
        W = self._stack("Wa_")
        return X2 @ W.T, (X2, W)

    def _input_back(self, cache, dZ, grads):
        X2, W = cache
        dW = dZ.T @ X2
        k = self.hidden
        for n, g in enumerate(GATES):
            grads["Wa_" + g] = dW[n * k : (n + 1) * k]
        return dZ @ W

    def _rec_pre(self, m):
        U = self._Ucat
        return m @ U.T, m

    def _rec_back(self, m, dz, grads):
        dU = dz.T @ m
        k = self.hidden
        for n, g in enumerate(GATES):
            key = "Ua_" + g
            if key in grads:
                grads[key] += dU[n * k : (n + 1) * k]
            else:
                grads[key] = dU[n * k : (n + 1) * k].copy()
        return dz @ self._Ucat

    def _project(self, h):
        return h @ self.Ub.T, h

    def _project_back(self, h, dm, grads):
        dUb = dm.T @ h
        if "Ub" in grads:
            grads["Ub"] += dUb
        else:
            grads["Ub"] = dUb
        return dm @ self.Ub

    def forward_seq(self, X, state, keep_cache=False):
        self._Ucat = self._stack("Ua_")
        return super().forward_seq(X, state, keep_cache)

    def backward_seq(self, cache, dOut):
        self._Ucat = self._stack("Ua_")
        return super().backward_seq(cache, dOut)


class TTLstmLayer(_LstmBase):
    """LSTM layer with each of the eight gate matrices held as a ``TTMatrix``."""

    kind = "tt-lstm"

    def __init__(self, **mats):
        for g in GATES:
            for p in ("W_", "V_", "b_"):
                setattr(self, p + g, mats[p + g])

    @classmethod
    def init(cls, rng, k, n_in, scale, d, max_rank):
        target_var = scale * scale / 3.0
        mats = {}
        for g in GATES:
            for p, shape in (("W_", (k, n_in)), ("V_", (k, k))):
                rows = ttm.factorize_modes(shape[0], d)
                cols = ttm.factorize_modes(shape[1], d)
                shapes = ttm.tt_core_shapes(rows, cols, max_rank)
                paths = math.prod(s[2] for s in shapes[:-1])
                sigma = (target_var / paths) ** (1.0 / (2 * d))
                cores = [rng.normal(0.0, sigma, s) for s in shapes]
                mats[p + g] = ttm.TTMatrix(cores, rows, cols)
            mats["b_" + g] = rng.uniform(-scale, scale, k)
        return cls(**mats)

    @property
    def hidden(self):
        return self.V_i.shape[0]

    @property
    def in_width(self):
        return self.W_i.shape[1]

    @property
    def out_width(self):
        return self.hidden

    def params(self):
        out = {}
        for p in ("W_", "V_"):
            for g in GATES:
                for j, core in enumerate(getattr(self, p + g).cores):
                    out[f"{p}{g}.core{j}"] = core
        out.update({"b_" + g: getattr(self, "b_" + g) for g in GATES})
        return out

    def _pre(self, p, X2):
        outs, caches = [], []
        for g in GATES:
            y, c = ttm.tt_matvec_cached(getattr(self, p + g), X2)
            outs.append(y)
            caches.append(c)
        return np.concatenate(outs, axis=1), caches

    def _back(self, p, caches, dZ, grads):
        k = self.hidden
        dX = 0.0
        for n, g in enumerate(GATES):
            mat = getattr(self, p + g)
            dx, dcores = ttm.tt_matvec_backward(mat, caches[n], dZ[:, n * k : (n + 1) * k])
            dX = dX + dx
            for j, dc in enumerate(dcores):
                key = f"{p}{g}.core{j}"
                if key in grads:
                    grads[key] += dc
                else:
                    grads[key] = dc
        return dX

    def _input_pre(self, X2):
        return self._pre("W_", X2)

    def _input_back(self, cache, dZ, grads):
        return self._back("W_", cache, dZ, grads)

    def _rec_pre(self, v):
        return self._pre("V_", v)

    def _rec_back(self, cache, dz, grads):
        return self._back("V_", cache, dz, grads)


def _check_width(X, width):
    if X.ndim != 3 or X.shape[2] != width:
        raise ShapeError(f"layer expects inputs of width {width}, got array of shape {X.shape}")


# ---------------------------------------------------------------------------
# single-step cells


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _state_batch(state: LayerState, squeeze: bool) -> LayerState:
    if not squeeze:
        return state
    f = lambda a: None if a is None else np.asarray(a, dtype=np.float64)[None, :]
    return LayerState(f(state.h), f(state.c), f(state.m))


def _state_unbatch(state: LayerState, squeeze: bool) -> LayerState:
    if not squeeze:
        return state
    f = lambda a: None if a is None else a[0]
    return LayerState(f(state.h), f(state.c), f(state.m))


def rnn_cell_forward(layer: DenseRnnLayer, x_in, x_prev):
    x, squeeze = _as_batch(x_in)
    h = np.asarray(x_prev, dtype=np.float64).reshape(x.shape[0], -1)
    if h.shape[1] != layer.hidden:
        raise ShapeError(f"previous state has width {h.shape[1]}, layer width is {layer.hidden}")
    out, _, _ = layer.forward_seq(x[None], LayerState(h))
    return out[0, 0] if squeeze else out[0]


def lstm_cell_forward(layer, x_in, state: LayerState):
    """One LSTM step for a dense or TT layer; returns ``(x_t, new_state)``."""
    x, squeeze = _as_batch(x_in)
    st = _state_batch(state, squeeze)
    if st.h.shape[-1] != layer.hidden or st.c.shape[-1] != layer.hidden:
        raise ShapeError(f"state widths {st.h.shape}, {st.c.shape} do not match hidden size {layer.hidden}")
    out, new, _ = layer.forward_seq(x[None], st)
    return (out[0, 0] if squeeze else out[0]), _state_unbatch(new, squeeze)


def lowrank_cell_forward(layer: LowRankLstmLayer, m_in, state: LayerState):
    """One low-rank LSTM step; returns ``(x_t, m_t, new_state)``."""
    m, squeeze = _as_batch(m_in)
    st = _state_batch(state, squeeze)
    if st.m is None or st.m.shape[-1] != layer.rank or m.shape[-1] != layer.in_width:
        raise ShapeError(f"projected widths must equal rank {layer.rank}")
    out, new, _ = layer.forward_seq(m[None], st)
    new = _state_unbatch(new, squeeze)
    return new.h, new.m, new


# ---------------------------------------------------------------------------
# model


@dataclass
class LmModel:
    config: ModelConfig
    vocab: Optional[Vocabulary]
    embedding: np.ndarray
    layers: list
    softmax_w: np.ndarray
    softmax_b: np.ndarray
    quantized: dict = field(default_factory=dict)

    @property
    def n_vocab(self) -> int:
        return self.embedding.shape[0]

    def named_params(self) -> dict[str, np.ndarray]:
        """Every trainable tensor once, in a fixed order."""
        out = {"embedding": self.embedding}
        for l, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"layers.{l}.{name}"] = arr
        out["softmax.W"] = self.softmax_w
        out["softmax.b"] = self.softmax_b
        return out

    def zero_state(self, batch_size: int) -> LmState:
        return LmState([layer.zero_state(batch_size) for layer in self.layers])

    def copy(self) -> "LmModel":
        layers = []
        for layer in self.layers:
            if isinstance(layer, DenseRnnLayer):
                layers.append(DenseRnnLayer(layer.W.copy(), layer.V.copy(), layer.b.copy()))
            elif isinstance(layer, DenseLstmLayer):
                layers.append(DenseLstmLayer(**{k: v.copy() for k, v in layer.params().items()}))
            elif isinstance(layer, LowRankLstmLayer):
                mats = {k: v.copy() for k, v in layer.params().items() if k != "Ub"}
                Wb = layers[-1].Ub if layers else None
                layers.append(LowRankLstmLayer(layer.Ub.copy(), Wb=Wb, **mats))
            else:
                mats = {}
                for g in GATES:
                    for p in ("W_", "V_"):
                        mats[p + g] = getattr(layer, p + g).copy()
                    mats["b_" + g] = getattr(layer, "b_" + g).copy()
                layers.append(TTLstmLayer(**mats))
        return LmModel(
            config=self.config,
            vocab=self.vocab,
            embedding=self.embedding.copy(),
            layers=layers,
            softmax_w=self.softmax_w.copy(),
            softmax_b=self.softmax_b.copy(),
            quantized=dict(self.quantized),
        )


def init_model(config: ModelConfig, vocab: Optional[Vocabulary] = None, seed: int = 0) -> LmModel:
    """Fresh model with weights uniform in ``[-init_scale, init_scale]``."""
    if vocab is not None and len(vocab) != config.n_vocab:
        raise VocabError(f"vocabulary has {len(vocab)} tokens, config says {config.n_vocab}")
    rng = np.random.default_rng(seed)
    s = config.init_scale
    k = config.hidden
    embedding = rng.uniform(-s, s, (config.n_vocab, config.input_width))
    layers = []
    n_in = config.input_width
    for l in range(config.n_layers):
        if config.layer_kind == "dense-rnn":
            layers.append(DenseRnnLayer.init(rng, k, n_in, s))
        elif config.layer_kind == "dense-lstm":
            layers.append(DenseLstmLayer.init(rng, k, n_in, s))
        elif config.layer_kind == "lowrank-lstm":
            Wb = layers[-1].Ub if layers else None
            layers.append(LowRankLstmLayer.init(rng, k, config.rank, s, Wb=Wb))
        else:
            cap = config.tt_ranks if config.tt_ranks is not None else k
            if isinstance(cap, (tuple, list)):
                cap = max(cap)
            layers.append(TTLstmLayer.init(rng, k, n_in, s, config.tt_dims, cap))
        n_in = layers[-1].out_width
    softmax_w = rng.uniform(-s, s, (config.n_vocab, config.output_width))
    softmax_b = rng.uniform(-s, s, config.n_vocab)
    return LmModel(config, vocab, embedding, layers, softmax_w, softmax_b)


def _check_ids(model, ids):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"token batch must be B x N, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.n_vocab):
        raise VocabError(f"token id outside [0, {model.n_vocab})")
    return ids.astype(np.int64)


def forward_cached(model: LmModel, ids, state: Optional[LmState] = None, keep_cache=True):
    """Run ``ids`` (B x N); returns ``(logits B x N x V, final state, cache)``."""
    ids = _check_ids(model, ids)
    B, N = ids.shape
    state = model.zero_state(B) if state is None else state
    X = model.embedding[ids.T]  # N x B x e
    caches, new_states = [], []
    for layer, st in zip(model.layers, state.layers):
        X, new, cache = layer.forward_seq(X, st, keep_cache)
        caches.append(cache)
        new_states.append(new)
    logits = X @ model.softmax_w.T + model.softmax_b  # N x B x V
    cache = (ids, X, caches) if keep_cache else None
    return logits.transpose(1, 0, 2), LmState(new_states), cache


def forward(model: LmModel, ids, state: Optional[LmState] = None):
    logits, new_state, _ = forward_cached(model, ids, state, keep_cache=False)
    return logits, new_state


def backward(model: LmModel, cache, dlogits) -> dict[str, np.ndarray]:
    """Reverse pass of ``forward_cached``; ``dlogits`` is B x N x V."""
    ids, top, caches = cache
    dl = dlogits.transpose(1, 0, 2)  # N x B x V
    N, B, V = dl.shape
    flat = dl.reshape(N * B, V)
    grads = {
        "softmax.W": flat.T @ top.reshape(N * B, -1),
        "softmax.b": flat.sum(axis=0),
    }
    dX = dl @ model.softmax_w
    for l in reversed(range(len(model.layers))):
        dX, g = model.layers[l].backward_seq(caches[l], dX)
        for name, arr in g.items():
            grads[f"layers.{l}.{name}"] = arr
    dE = np.zeros_like(model.embedding)
    np.add.at(dE, ids.T.reshape(-1), dX.reshape(N * B, -1))
    grads["embedding"] = dE
    return grads


def sequence_log_prob(model: LmModel, tokens) -> float:
    """``log P(w_1..w_T)`` by the chain rule; the first token is conditioned on ``<eos>``."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise ValueError("sequence_log_prob needs a nonempty sequence")
    start = model.vocab.eos_id if model.vocab is not None else 0
    inputs = np.concatenate([[start], tokens[:-1]])[None, :]
    logits, _ = forward(model, inputs)
    lp = log_softmax(logits[0])
    return float(lp[np.arange(len(tokens)), tokens].sum())


def exp_or_inf(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


def batch_nll(logits, targets) -> np.ndarray:
    """Per-token negative log-likelihood, B x N."""
    lp = log_softmax(logits)
    B, N = targets.shape
    return -lp[np.arange(B)[:, None], np.arange(N)[None, :], targets]


def perplexity(model: LmModel, stream, batch_size: int = 1, unroll: int = 35) -> float:
    """``exp`` of the mean next-token cross-entropy over the whole stream.

    Every stripe position after the first is scored once, so the value does
    not depend on ``unroll``.
    """
    plan = batchify(stream, batch_size, unroll, keep_tail=True)
    state = model.zero_state(batch_size)
    total, count = 0.0, 0
    for inputs, targets in plan:
        logits, state = forward(model, inputs, state)
        total += float(batch_nll(logits, targets).sum())
        count += targets.size
    return exp_or_inf(total / count)


# ---------------------------------------------------------------------------
# size accounting


def param_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """``(name, shape, is_weight)`` for every stored tensor of a configuration.

    TT shapes assume the rank cap is reached wherever the unfolding allows it.
    """
    k = config.hidden
    out = [("embedding", (config.n_vocab, config.input_width), True)]
    n_in = config.input_width
    for l in range(config.n_layers):
        pre = f"layers.{l}."
        kind = config.layer_kind
        if kind == "dense-rnn":
            out += [(pre + "W", (k, n_in), True), (pre + "V", (k, k), True), (pre + "b", (k,), False)]
            n_in = k
            continue
        if kind == "dense-lstm":
            out += [(pre + p + g, (k, n_in if p == "W_" else k), True) for p in ("W_", "V_") for g in GATES]
            n_in = k
        elif kind == "lowrank-lstm":
            r = config.rank
            out += [(pre + p + g, (k, r), True) for p in ("Wa_", "Ua_") for g in GATES]
            out.append((pre + "Ub", (r, k), True))
            n_in = r
        else:
            d = config.tt_dims
            cap = config.tt_ranks if config.tt_ranks is not None else k
            if isinstance(cap, (tuple, list)):
                cap = max(cap)
            for p in ("W_", "V_"):
                rows = ttm.factorize_modes(k, d)
                cols = ttm.factorize_modes(n_in if p == "W_" else k, d)
                shapes = ttm.tt_core_shapes(rows, cols, cap)
                for g in GATES:
                    out += [(f"{pre}{p}{g}.core{j}", s, True) for j, s in enumerate(shapes)]
            n_in = k
        out += [(pre + "b_" + g, (k,), False) for g in GATES]
    out.append(("softmax.W", (config.n_vocab, config.output_width), True))
    out.append(("softmax.b", (config.n_vocab,), False))
    return out


def model_manifest(model: LmModel) -> list[tuple[str, tuple[int, ...], bool]]:
    return [(name, arr.shape, arr.ndim >= 2) for name, arr in model.named_params().items()]


def count_params(model) -> int:
    """Stored scalar parameters, biases included; accepts a model or a config."""
    manifest = param_manifest(model) if isinstance(model, ModelConfig) else model_manifest(model)
    return int(sum(math.prod(shape) for _, shape, _ in manifest))


def model_size_bytes(model, precision: Optional[str] = None) -> int:
    """Bytes of the serialized tensors plus fixed file framing.

    ``float32`` stores 4 bytes per scalar; ``quant8`` stores weight matrices
    as one byte per entry plus their min/scale pair and keeps biases at 4
    bytes. The metadata document is not counted. ``None`` picks ``quant8`` for
    models holding quantized tensors.
    """
    from .store import FRAME_BYTES, tensor_blob_size

    if isinstance(model, ModelConfig):
        manifest = param_manifest(model)
        precision = precision or "float32"
    else:
        manifest = model_manifest(model)
        if precision is None:
            precision = "quant8" if model.quantized else "float32"
    if precision not in ("float32", "quant8"):
        raise ValueError(f"unknown precision {precision!r}")
    total = FRAME_BYTES
    for _, shape, is_weight in manifest:
        tag = "quant8" if precision == "quant8" and is_weight else "float32"
        total += tensor_blob_size(shape, tag)
    return total

