"""Singular value decomposition of block-diagonal image matrices.

Each channel block is factored independently with a one-sided Jacobi
iteration and the per-block triples are merged into one descending
spectrum of length ``P = K * min(M, N)``. Ties in the merge are broken by
lower channel index, then lower within-channel index.
"""

from dataclasses import dataclass

import numpy as np

from ._jacobi import EPS, orthogonalize_batch
from .image import ImageMatrix

__all__ = [
    "SvdConvergenceError",
    "SpectrumError",
    "SvdResult",
    "block_svd",
    "compute_svd",
    "singular_values",
    "reconstruct",
    "truncate",
    "energy_fraction",
    "subspace_angle_sin",
]

MAX_SWEEPS = 100


class SvdConvergenceError(ArithmeticError):
    """The Jacobi iteration did not converge within the sweep budget."""

    def __init__(self, msg, channel=None, image=None):
        super().__init__(msg)
        self.channel = channel
        self.image = image


class SpectrumError(ValueError):
    """A spectral quantity is undefined for the given input (e.g. all-zero)."""


def _check_converged(sweeps, K, max_sweeps):
    bad = np.flatnonzero(sweeps < 0)
    if bad.size:
        b = int(bad[0])
        image, channel = divmod(b, K)
        raise SvdConvergenceError(
            f"Jacobi SVD did not converge in {max_sweeps} sweeps "
            f"(image {image}, channel {channel})",
            channel=channel,
            image=image,
        )


def _complete_null_vectors(vecs, sigma):
    # Columns with exactly zero singular value carry no direction; replace them
    # by an orthonormal completion of the valid ones.
    dead = ~(sigma > 0)
    rows = np.flatnonzero(dead.any(axis=1))
    if rows.size == 0:
        return vecs
    z = np.where(dead[rows][:, :, None], 0.0, vecs[rows])
    q, _ = np.linalg.qr(np.swapaxes(z, 1, 2), mode="complete")
    fill = np.swapaxes(q[:, :, : vecs.shape[1]], 1, 2)
    vecs[rows] = np.where(dead[rows][:, :, None], fill, vecs[rows])
    return vecs


def block_svd(blocks, compute_vectors=True, max_sweeps=MAX_SWEEPS, K=1):
    """Thin SVD of a stack of ``(M, N)`` blocks.

    Parameters
    ----------
    blocks : ndarray of shape (B, M, N)
    compute_vectors : bool
        When False only singular values are returned (faster).
    max_sweeps : int
        Sweep budget per block.
    K : int
        Channels per image, used only to report which image/channel failed.

    Returns
    -------
    values : ndarray (B, p)
        Descending singular values per block, ``p = min(M, N)``.
    left, right : ndarray (B, p, M), (B, p, N) or None
        Singular vectors stored as rows. The largest-magnitude entry of each
        left vector is nonnegative.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    B, M, N = blocks.shape
    tall = M >= N
    # rows of ``at`` are the columns of the matrix being orthogonalised
    at = np.array(np.swapaxes(blocks, 1, 2) if tall else blocks, order="C", copy=True)
    n = at.shape[1]
    if compute_vectors:
        vt = np.repeat(np.eye(n)[None], B, axis=0)
    else:
        vt = np.zeros((1, 1, 1))
    tol = max(M, N) * EPS
    sweeps = orthogonalize_batch(at, vt, compute_vectors, tol, max_sweeps)
    _check_converged(sweeps, K, max_sweeps)

    sigma = np.sqrt(np.einsum("bij,bij->bi", at, at))
    order = np.argsort(-sigma, axis=1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=1)
    if not compute_vectors:
        return sigma, None, None

    at = np.take_along_axis(at, order[:, :, None], axis=1)
    vt = np.take_along_axis(vt, order[:, :, None], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        normalized = at / sigma[:, :, None]
    normalized = _complete_null_vectors(normalized, sigma)
    left, right = (normalized, vt) if tall else (vt, normalized)

    idx = np.argmax(np.abs(left), axis=2)
    sign = np.where(np.take_along_axis(left, idx[:, :, None], axis=2) < 0, -1.0, 1.0)
    return sigma, left * sign, right * sign


@dataclass(frozen=True)
class SvdResult:
    """Merged descending spectrum of a block-diagonal matrix.

    ``left[i]`` (length M) and ``right[i]`` (length N) are the nonzero part of
    the ``i``-th singular vector pair; it lives in block ``channel_of[i]``
    where it is the ``local_index[i]``-th triple of that block.
    """

    values: np.ndarray
    left: np.ndarray
    right: np.ndarray
    channel_of: np.ndarray
    local_index: np.ndarray
    block_dims: tuple

    @property
    def P(self):
        return self.values.shape[0]

    def channel_triples(self, k):
        sel = self.channel_of == k
        return self.values[sel], self.left[sel], self.right[sel]


def compute_svd(x, max_sweeps=MAX_SWEEPS):
    """SVD of an :class:`ImageMatrix`; per-channel factorizations merged."""
    M, N, K = x.block_dims
    sigma, left, right = block_svd(x.blocks, True, max_sweeps, K=K)
    p = sigma.shape[1]
    values = sigma.ravel()
    channel_of = np.repeat(np.arange(K), p)
    local_index = np.tile(np.arange(p), K)
    order = np.lexsort((local_index, channel_of, -values))
    return SvdResult(
        values=values[order],
        left=left.reshape(K * p, M)[order],
        right=right.reshape(K * p, N)[order],
        channel_of=channel_of[order],
        local_index=local_index[order],
        block_dims=(M, N, K),
    )


def singular_values(X, max_sweeps=MAX_SWEEPS):
    """Merged descending spectra for a batch of images.

    ``X`` is an ``(n, M, N, K)`` array (or an :class:`ImageMatrix`, giving a
    single row). Returns an ``(n, K * min(M, N))`` array.
    """
    if isinstance(X, ImageMatrix):
        blocks = X.blocks[None]
    else:
        X = np.asarray(X, dtype=np.float64)
        blocks = np.moveaxis(X, -1, 1)
    n, K, M, N = blocks.shape
    sigma, _, _ = block_svd(blocks.reshape(n * K, M, N), False, max_sweeps, K=K)
    merged = sigma.reshape(n, K * sigma.shape[1])
    return -np.sort(-merged, axis=1)


def _assemble(svd, keep):
    M, N, K = svd.block_dims
    blocks = np.zeros((K, M, N))
    for k in range(K):
        sel = keep & (svd.channel_of == k)
        blocks[k] = (svd.left[sel].T * svd.values[sel]) @ svd.right[sel]
    return ImageMatrix(blocks)


def reconstruct(svd):
    """Inverse of :func:`compute_svd`: ``sum_i s_i u_i v_i^T`` per block."""
    return _assemble(svd, np.ones(svd.P, dtype=bool))


def truncate(svd, k):
    """Rank-``k`` compression keeping the ``k`` globally largest triples."""
    if not 0 <= k <= svd.P:
        raise ValueError(f"k must lie in [0, {svd.P}], got {k}")
    return _assemble(svd, np.arange(svd.P) < k)


def energy_fraction(svd, k):
    """Share of squared spectrum captured by the top ``k`` singular values."""
    values = svd.values if isinstance(svd, SvdResult) else np.asarray(svd, dtype=np.float64)
    P = values.shape[-1]
    if not 1 <= k <= P:
        raise ValueError(f"k must lie in [1, {P}], got {k}")
    energy = np.sum(values ** 2, axis=-1)
    if np.any(energy == 0):
        raise SpectrumError("energy fraction is undefined for an all-zero spectrum")
    return np.cumsum(values ** 2, axis=-1)[..., k - 1] / energy


def subspace_angle_sin(u, u_hat, tol=1e-8):
    """Sine of the angle between two unit vectors (sign-invariant)."""
    u = np.asarray(u, dtype=np.float64)
    u_hat = np.asarray(u_hat, dtype=np.float64)
    nu, nh = np.linalg.norm(u), np.linalg.norm(u_hat)
    if nu == 0 or nh == 0:
        raise ValueError("angle undefined for zero-norm vectors")
    if abs(nu - 1) > tol or abs(nh - 1) > tol:
        raise ValueError("subspace_angle_sin expects unit-norm vectors")
    u, u_hat = u / nu, u_hat / nh
    c = float(u @ u_hat)
    # same value as sqrt(1 - c^2), evaluated without cancellation near c = 1
    return float(min(1.0, np.linalg.norm(u_hat - c * u)))
