# One-sided (Hestenes) Jacobi SVD kernels.
#
# Storage is row-oriented: ``at[b]`` holds the columns of the matrix being
# orthogonalised as rows, so every rotation touches two contiguous rows.

import numpy as np
from numba import njit

EPS = np.finfo(np.float64).eps


@njit(cache=True)
def _orthogonalize(at, vt, want_v, tol, max_sweeps):
    n, m = at.shape
    frob2 = 0.0
    for p in range(n):
        for i in range(m):
            frob2 += at[p, i] * at[p, i]
    # columns below eps * ||A||_F are rounding residue of an exact null space;
    # zeroing them is within backward error and stops endless rotation of noise
    null2 = EPS * EPS * frob2
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = at[p, i]
                    y = at[q, i]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if alpha <= null2 or beta <= null2:
                    if alpha <= null2:
                        for i in range(m):
                            at[p, i] = 0.0
                    if beta <= null2:
                        for i in range(m):
                            at[q, i] = 0.0
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = at[p, i]
                    y = at[q, i]
                    at[p, i] = c * x - s * y
                    at[q, i] = s * x + c * y
                if want_v:
                    for i in range(n):
                        x = vt[p, i]
                        y = vt[q, i]
                        vt[p, i] = c * x - s * y
                        vt[q, i] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


@njit(cache=True)
def orthogonalize_batch(at, vt, want_v, tol, max_sweeps):
    """Rotate ``at[b]`` rows to mutual orthogonality, accumulating into ``vt[b]``.

    Returns the sweep count per matrix, ``-1`` where the budget ran out.
    """
    out = np.empty(at.shape[0], np.int64)
    for b in range(at.shape[0]):
        if want_v:
            out[b] = _orthogonalize(at[b], vt[b], True, tol, max_sweeps)
        else:
            out[b] = _orthogonalize(at[b], vt[0], False, tol, max_sweeps)
    return out
