"""Tensor-Train matrices.

A ``TTMatrix`` of shape ``N x M`` with row modes ``n_1..n_d`` and column
modes ``m_1..m_d`` stores cores ``G_k`` of shape ``(r_{k-1}, n_k * m_k, r_k)``.
Row and column indices are split into mode digits in row-major order (first
mode most significant) and fused per core as ``j_k = row_k * m_k + col_k``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg
from .errors import ShapeError


@dataclass(frozen=True)
class TTConfig:
    d: int
    row_modes: tuple[int, ...] | None = None
    col_modes: tuple[int, ...] | None = None
    max_ranks: int | tuple[int, ...] | None = None
    eps: float | None = None

    def __post_init__(self):
        if (self.max_ranks is None) == (self.eps is None):
            if not (self.max_ranks is None and self.eps is None):
                raise ValueError("give exactly one of max_ranks and eps")

    def modes_for(self, shape) -> tuple[tuple[int, ...], tuple[int, ...]]:
        rows = self.row_modes or factorize_modes(shape[0], self.d)
        cols = self.col_modes or factorize_modes(shape[1], self.d)
        return tuple(rows), tuple(cols)


class TTMatrix:
    def __init__(self, cores: Sequence[np.ndarray], row_modes, col_modes):
        self.cores = [np.asarray(c, dtype=np.float64) for c in cores]
        self.row_modes = tuple(int(n) for n in row_modes)
        self.col_modes = tuple(int(m) for m in col_modes)
        d = len(self.cores)
        if len(self.row_modes) != d or len(self.col_modes) != d:
            raise ShapeError(f"{d} cores but modes {self.row_modes} / {self.col_modes}")
        prev = 1
        for k, core in enumerate(self.cores):
            nm = self.row_modes[k] * self.col_modes[k]
            if core.ndim != 3 or core.shape[0] != prev or core.shape[1] != nm:
                raise ShapeError(f"core {k} has shape {core.shape}, expected ({prev}, {nm}, r)")
            prev = core.shape[2]
        if prev != 1:
            raise ShapeError(f"last rank must be 1, got {prev}")

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def shape(self) -> tuple[int, int]:
        return math.prod(self.row_modes), math.prod(self.col_modes)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    def core4(self, k: int) -> np.ndarray:
        c = self.cores[k]
        return c.reshape(c.shape[0], self.row_modes[k], self.col_modes[k], c.shape[2])

    def copy(self) -> "TTMatrix":
        return TTMatrix([c.copy() for c in self.cores], self.row_modes, self.col_modes)

    def __repr__(self):
        return f"TTMatrix(shape={self.shape}, modes={self.row_modes}x{self.col_modes}, ranks={self.ranks})"


def factorize_modes(dim: int, d: int) -> tuple[int, ...]:
    """Split ``dim`` into ``d`` balanced factors, largest first.

    Prime factors are taken largest first and each multiplies the currently
    smallest mode.
    """
    if dim < 1 or d < 1:
        raise ValueError(f"need dim >= 1 and d >= 1, got {dim}, {d}")
    primes, n, p = [], dim, 2
    while p * p <= n:
        while n % p == 0:
            primes.append(p)
            n //= p
        p += 1
    if n > 1:
        primes.append(n)
    modes = [1] * d
    for p in sorted(primes, reverse=True):
        i = min(range(d), key=lambda j: (modes[j], j))
        modes[i] *= p
    if d > 1 and min(modes) < 2:
        warnings.warn(f"{dim} cannot be split into {d} factors >= 2; using modes {sorted(modes, reverse=True)}")
    return tuple(sorted(modes, reverse=True))


def _to_tensor(a: np.ndarray, rows, cols) -> np.ndarray:
    d = len(rows)
    t = a.reshape(tuple(rows) + tuple(cols))
    perm = [ax for k in range(d) for ax in (k, d + k)]
    return t.transpose(perm).reshape([rows[k] * cols[k] for k in range(d)])


def _from_tensor(t: np.ndarray, rows, cols) -> np.ndarray:
    d = len(rows)
    t = t.reshape([x for k in range(d) for x in (rows[k], cols[k])])
    perm = [2 * k for k in range(d)] + [2 * k + 1 for k in range(d)]
    return t.transpose(perm).reshape(math.prod(rows), math.prod(cols))


def tt_from_dense(a, config: TTConfig) -> TTMatrix:
    """TT-SVD: sequential reshape and truncated SVD of the fused tensor."""
    a = linalg.as_matrix(a)
    rows, cols = config.modes_for(a.shape)
    if len(rows) != config.d or len(cols) != config.d:
        raise ShapeError(f"need {config.d} modes, got {rows} / {cols}")
    if math.prod(rows) != a.shape[0] or math.prod(cols) != a.shape[1]:
        raise ShapeError(f"modes {rows} x {cols} do not match matrix shape {a.shape}")
    d = config.d
    sizes = [rows[k] * cols[k] for k in range(d)]
    caps = config.max_ranks
    if caps is not None and not isinstance(caps, (tuple, list)):
        caps = (int(caps),) * (d - 1)
    if caps is not None and len(caps) != d - 1:
        raise ShapeError(f"need {d - 1} rank caps, got {len(caps)}")
    delta = None
    if config.eps is not None and d > 1:
        delta = config.eps * linalg.frobenius_norm(a) / math.sqrt(d - 1)

    work = _to_tensor(a, rows, cols)
    cores, r_prev = [], 1
    for k in range(d - 1):
        mat = work.reshape(r_prev * sizes[k], -1)
        res = linalg.svd(mat)
        if delta is not None:
            tail = np.cumsum((res.S ** 2)[::-1])[::-1]  # tail[i] = sum_{j >= i} s_j^2
            r = len(res.S)
            while r > 1 and tail[r - 1] <= delta ** 2:
                r -= 1
        else:
            r = res.rank if caps is None else min(res.rank, int(caps[k]))
        cores.append(res.U[:, :r].reshape(r_prev, sizes[k], r))
        work = res.S[:r, None] * res.V[:, :r].T
        r_prev = r
    cores.append(work.reshape(r_prev, sizes[-1], 1))
    return TTMatrix(cores, rows, cols)


def tt_to_dense(tt: TTMatrix) -> np.ndarray:
    t = tt.cores[0].reshape(tt.cores[0].shape[1], -1)
    for core in tt.cores[1:]:
        t = (t @ core.reshape(core.shape[0], -1)).reshape(-1, core.shape[2])
    return _from_tensor(t.reshape(-1), tt.row_modes, tt.col_modes)


def tt_element(tt: TTMatrix, index) -> float:
    """Entry at the fused multi-index ``(j_1, .., j_d)``."""
    index = tuple(int(j) for j in index)
    if len(index) != tt.d:
        raise IndexError(f"need {tt.d} indices, got {len(index)}")
    out = np.ones((1, 1))
    for core, j in zip(tt.cores, index):
        if not 0 <= j < core.shape[1]:
            raise IndexError(f"index {j} outside [0, {core.shape[1]})")
        out = out @ core[:, j, :]
    return float(out[0, 0])


def tt_entry(tt: TTMatrix, row: int, col: int) -> float:
    rd = np.unravel_index(row, tt.row_modes)
    cd = np.unravel_index(col, tt.col_modes)
    return tt_element(tt, [rd[k] * tt.col_modes[k] + cd[k] for k in range(tt.d)])


def tt_matvec_cached(tt: TTMatrix, x: np.ndarray):
    """``y = A x`` for a batch of row vectors ``x`` (B x M), plus a backward cache.

    The contraction sweeps cores left to right; the working tensor has layout
    ``(B * n_1..n_{k-1}, r_{k-1}, m_k, m_{k+1}..m_d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    N, M = tt.shape
    if x.ndim != 2 or x.shape[1] != M:
        raise ShapeError(f"vector batch {x.shape} incompatible with TT matrix {tt.shape}")
    B = x.shape[0]
    work = x.reshape(B, 1, M)
    rest = M
    cache = []
    for k in range(tt.d):
        g = tt.core4(k)
        m = tt.col_modes[k]
        rest //= m
        lead = work.shape[0]
        t = work.reshape(lead, g.shape[0], m, rest)
        cache.append(t)
        # (lead, r, m, rest) x (r, n, m, s) -> (lead, rest, n, s)
        out = np.tensordot(t, g, axes=([1, 2], [0, 2]))
        work = out.transpose(0, 2, 3, 1).reshape(lead * g.shape[1], g.shape[3], rest)
    return work.reshape(B, N), cache


def tt_matvec(tt: TTMatrix, x) -> np.ndarray:
    """Product with a vector (length M) or a batch of row vectors (B x M)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != tt.shape[1]:
            raise ShapeError(f"vector of length {x.shape[0]} incompatible with TT matrix {tt.shape}")
        return tt_matvec_cached(tt, x[None, :])[0][0]
    return tt_matvec_cached(tt, x)[0]


def tt_matvec_backward(tt: TTMatrix, cache, dy: np.ndarray):
    """Gradients of ``sum(dy * y)`` w.r.t. the input batch and each core."""
    B = dy.shape[0]
    grads = [None] * tt.d
    dwork = dy.reshape(B, tt.shape[0])
    for k in reversed(range(tt.d)):
        g = tt.core4(k)
        t = cache[k]
        lead, r, m, rest = t.shape
        n, s = g.shape[1], g.shape[3]
        dout = dwork.reshape(lead, n, s, rest).transpose(0, 3, 1, 2)  # (lead, rest, n, s)
        dg = np.tensordot(t, dout, axes=([0, 3], [0, 1]))  # (r, m, n, s)
        grads[k] = dg.transpose(0, 2, 1, 3).reshape(tt.cores[k].shape)
        dt = np.tensordot(dout, g, axes=([2, 3], [1, 3]))  # (lead, rest, r, m)
        dwork = dt.transpose(0, 2, 3, 1)
    return dwork.reshape(B, tt.shape[1]), grads


def tt_param_count(tt: TTMatrix) -> int:
    return int(sum(c.size for c in tt.cores))


def tt_core_shapes(rows, cols, max_rank) -> list[tuple[int, int, int]]:
    """Core shapes reached by TT-SVD with a uniform rank cap on a generic matrix."""
    d = len(rows)
    sizes = [rows[k] * cols[k] for k in range(d)]
    ranks = [1]
    for k in range(d - 1):
        left = math.prod(sizes[: k + 1])
        right = math.prod(sizes[k + 1 :])
        ranks.append(min(ranks[-1] * sizes[k], right, left, int(max_rank)))
    ranks.append(1)
    return [(ranks[k], sizes[k], ranks[k + 1]) for k in range(d)]


def tt_random(rows, cols, ranks, rng=None, scale=1.0) -> TTMatrix:
    rng = np.random.default_rng(rng)
    ranks = list(ranks)
    cores = [
        scale * rng.standard_normal((ranks[k], rows[k] * cols[k], ranks[k + 1]))
        for k in range(len(rows))
    ]
    return TTMatrix(cores, rows, cols)
