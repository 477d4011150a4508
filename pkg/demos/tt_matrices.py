"""Tensor-train matrices in a few lines.

A 600 x 600 matrix is reshaped into a four-way tensor with modes
(6, 5, 5, 4) on each side and squeezed through TT-SVD. We look at how
storage and error trade off, then multiply by a vector without ever
rebuilding the dense matrix.
"""

import numpy as np

from lmcompress.tt import TTConfig, factorize_modes, tt_from_dense, tt_matvec, tt_param_count, tt_random, tt_to_dense

rng = np.random.default_rng(0)
modes = factorize_modes(600, 4)
print("modes for 600 split four ways:", modes)

# a matrix with genuine TT structure plus a little noise
structured = tt_to_dense(tt_random(modes, modes, (1, 6, 6, 6, 1), rng))
a = structured + 1e-3 * np.linalg.norm(structured) / 600 * rng.normal(size=(600, 600))
norm = np.linalg.norm(a)

print(f"\n{'rank cap':>8} {'params':>9} {'rel error':>10}")
for cap in (1, 2, 4, 6, 12, 24):
    tt = tt_from_dense(a, TTConfig(4, max_ranks=cap))
    err = np.linalg.norm(a - tt_to_dense(tt)) / norm
    print(f"{cap:>8} {tt_param_count(tt):>9} {err:>10.2e}")
print(f"{'dense':>8} {a.size:>9}")

print("\nAccuracy mode picks the ranks for you")
for eps in (1e-1, 1e-2, 1e-4):
    tt = tt_from_dense(a, TTConfig(4, eps=eps))
    err = np.linalg.norm(a - tt_to_dense(tt)) / norm
    print(f"  eps={eps:<6g} ranks={tt.ranks} error={err:.2e}")

tt = tt_from_dense(a, TTConfig(4, max_ranks=6))
x = rng.normal(size=600)
y = tt_matvec(tt, x)
print(f"\nmatvec through the cores vs dense product: {np.linalg.norm(y - tt_to_dense(tt) @ x):.1e}")
