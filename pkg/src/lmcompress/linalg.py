"""Dense kernels: matrix product, Frobenius norm and a one-sided Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, RankError, ShapeError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # rows x r, orthonormal columns
    S: np.ndarray  # r, non-increasing
    V: np.ndarray  # cols x r, orthonormal columns

    @property
    def rank(self) -> int:
        return len(self.S)

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_matrix(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def _round_robin(n: int):
    """Pairings for one Jacobi sweep; every pair of ``n`` (even) indices once."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _one_sided_jacobi(a: np.ndarray):
    """Orthogonalise the columns of a tall matrix ``a`` (m >= n).

    Returns ``(W, V)`` with ``W = a @ V`` having mutually orthogonal columns
    and ``V`` orthogonal. Columns are held as rows internally so that the
    pair gathers are contiguous.
    """
    m, n = a.shape
    padded = n + (n % 2)
    Wt = np.zeros((padded, m))
    Wt[:n] = a.T
    Vt = np.eye(padded)
    rounds = _round_robin(padded) if padded > 1 else []
    for _ in range(JACOBI_MAX_SWEEPS):
        worst = 0.0
        for p, q in rounds:
            wp, wq = Wt[p], Wt[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            scale = np.sqrt(alpha * beta)
            active = (scale > 0) & (np.abs(gamma) > JACOBI_TOL * scale)
            if not active.any():
                continue
            worst = max(worst, float(np.max(np.abs(gamma[active]) / scale[active])))
            p, q = p[active], q[active]
            wp, wq = wp[active], wq[active]
            zeta = (beta[active] - alpha[active]) / (2 * gamma[active])
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            Wt[p], Wt[q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = Vt[p], Vt[q]
            Vt[p], Vt[q] = c * vp - s * vq, s * vp + c * vq
        if worst <= JACOBI_TOL:
            break
    return Wt[:n].T, Vt[:n, :n].T


def _complete_orthonormal(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``U`` not flagged ``good`` with an orthonormal completion."""
    U = U.copy()
    m = U.shape[0]
    basis = [U[:, j] for j in range(U.shape[1]) if good[j]]
    candidates = iter(np.eye(m))
    for j in range(U.shape[1]):
        if good[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        U[:, j] = v
        basis.append(v)
    return U


def svd(a) -> SvdResult:
    """Thin SVD with ``min(rows, cols)`` singular triplets."""
    a = as_matrix(a)
    if a.size == 0:
        raise ShapeError(f"empty matrix {a.shape}")
    transposed = a.shape[0] < a.shape[1]
    work = a.T if transposed else a
    q = None
    if work.shape[0] > work.shape[1]:
        # QR preconditioning: rotate the small triangular factor instead
        q, work = np.linalg.qr(work)
    W, V = _one_sided_jacobi(work)
    if q is not None:
        W = q @ W
    sigma = np.sqrt(np.einsum("ij,ij->j", W, W))
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[:, order], V[:, order]
    tiny = sigma[0] * work.shape[0] * np.finfo(float).eps
    good = sigma > tiny
    U = np.zeros_like(W)
    U[:, good] = W[:, good] / sigma[good]
    if not good.all():
        U = _complete_orthonormal(U, good)
        sigma = np.where(good, sigma, 0.0)
    if transposed:
        return SvdResult(U=V, S=sigma, V=U)
    return SvdResult(U=U, S=sigma, V=V)


def truncated_svd(a, r: int) -> SvdResult:
    """Best rank-``r`` factorisation ``a ~ U diag(S) V^T``."""
    a = as_matrix(a)
    full = min(a.shape)
    if not isinstance(r, (int, np.integer)) or r < 1 or r > full:
        raise RankError(f"rank {r} outside [1, {full}] for shape {a.shape}")
    res = svd(a)
    return SvdResult(U=res.U[:, :r].copy(), S=res.S[:r].copy(), V=res.V[:, :r].copy())
