"""Batch rank-k compression of images through the merged block spectrum."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .svd import block_svd
from .validation import check_images

__all__ = ["truncate_images", "LowRankCompressor"]


def _factor(X):
    n, M, N, K = X.shape
    blocks = np.moveaxis(X, -1, 1).reshape(n * K, M, N)
    sigma, left, right = block_svd(blocks, True, K=K)
    p = sigma.shape[1]
    sigma = sigma.reshape(n, K * p)
    # stable sort of channel-major values gives the global tie-break order
    order = np.argsort(-sigma, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(K * p)[None], axis=1)
    return sigma, rank, left.reshape(n, K, p, M), right.reshape(n, K, p, N)


def truncate_images(X, k):
    """Keep the ``k`` globally largest singular triples of every image.

    Returns ``(compressed, energy_fraction)``; compressed images are not
    clipped and may leave ``[0, 1]`` slightly.
    """
    X = check_images(X, check_range=False)
    n, M, N, K = X.shape
    P = K * min(M, N)
    if not 0 <= k <= P:
        raise ValueError(f"k must lie in [0, {P}], got {k}")
    sigma, rank, left, right = _factor(X)
    kept = np.where(rank < k, sigma, 0.0).reshape(n, K, -1)
    out = np.einsum("nkpa,nkp,nkpb->nabk", left, kept, right)
    total = np.sum(sigma ** 2, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(total > 0, np.sum(kept.reshape(n, -1) ** 2, axis=1) / total, np.nan)
    return out, r


class LowRankCompressor(TransformerMixin, BaseEstimator):
    """Rank-``k`` image compressor.

    Parameters
    ----------
    k : int
        Number of global singular triples kept per image.
    clip : bool, default=False
        Clip compressed pixels back into ``[0, 1]``.
    image_shape : tuple, optional
        Needed only for flattened input.

    Attributes
    ----------
    image_shape_ : tuple
    energy_fraction_ : ndarray
        Retained energy share per image from the last :meth:`transform`
        (``nan`` for all-zero images).
    """

    def __init__(self, k=10, clip=False, image_shape=None):
        self.k = k
        self.clip = clip
        self.image_shape = image_shape

    def fit(self, X, y=None):
        X = check_images(X, self.image_shape)
        M, N, K = X.shape[1:]
        if not 0 <= self.k <= K * min(M, N):
            raise ValueError(f"k must lie in [0, {K * min(M, N)}], got {self.k}")
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "image_shape_")
        X = check_images(X, self.image_shape_, check_range=False)
        out, self.energy_fraction_ = truncate_images(X, self.k)
        return np.clip(out, 0.0, 1.0) if self.clip else out
