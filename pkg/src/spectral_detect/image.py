"""Images, their block-diagonal matrix form, norms and orthonormal rotations.

An ``M x N x K`` image is treated as the ``(M*K) x (N*K)`` block-diagonal
matrix whose ``k``-th diagonal block is channel ``k``. Only the ``K`` blocks
are ever stored; :meth:`ImageMatrix.to_dense` assembles the full matrix for
cross-checks.
"""

from dataclasses import dataclass, field

import numpy as np

from .validation import readonly

__all__ = [
    "Image",
    "ImageMatrix",
    "Perturbation",
    "RotationPair",
    "NormReport",
    "to_image_matrix",
    "to_image",
    "apply_perturbation",
    "norm_2",
    "norm_frobenius",
    "norm_max",
    "rotate",
    "random_rotation",
    "givens",
    "check_norm_inequalities",
]

ORTHONORMAL_TOL = 1e-10
NORM_SLACK = 1e-9


@dataclass(frozen=True)
class Image:
    """Pixel tensor of shape ``(M, N, K)`` with values in ``[0, 1]``."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim == 2:
            p = p[..., None]
        if p.ndim != 3 or min(p.shape) < 1:
            raise ValueError(f"image pixels must be (M, N, K), got shape {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", readonly(p))

    @classmethod
    def from_flat(cls, values, M, N, K=1):
        """Build from ``M*N*K`` row-major, channel-last pixel values."""
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != M * N * K:
            raise ValueError(f"expected {M * N * K} pixels, got {values.size}")
        return cls(values.reshape(M, N, K))

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def flat(self):
        return self.pixels.ravel()


@dataclass(frozen=True)
class ImageMatrix:
    """Block-diagonal image matrix stored as ``K`` blocks of shape ``(M, N)``."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.float64)
        if b.ndim == 2:
            b = b[None]
        if b.ndim != 3 or min(b.shape) < 1:
            raise ValueError(f"blocks must have shape (K, M, N), got {b.shape}")
        object.__setattr__(self, "blocks", readonly(b))

    @property
    def block_dims(self):
        K, M, N = self.blocks.shape
        return M, N, K

    @property
    def rank_bound(self):
        """``P = K * min(M, N)``: the length of the merged spectrum."""
        M, N, K = self.block_dims
        return K * min(M, N)

    def to_dense(self):
        M, N, K = self.block_dims
        dense = np.zeros((M * K, N * K))
        for k in range(K):
            dense[k * M:(k + 1) * M, k * N:(k + 1) * N] = self.blocks[k]
        return dense


@dataclass(frozen=True)
class Perturbation:
    """Block-diagonal additive perturbation ``E`` (same block layout as ``X``)."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.float64)
        if b.ndim == 2:
            b = b[None]
        if b.ndim != 3:
            raise ValueError(f"blocks must have shape (K, M, N), got {b.shape}")
        object.__setattr__(self, "blocks", readonly(b))

    @classmethod
    def between(cls, x, x_hat):
        """The perturbation taking ``x`` to ``x_hat``."""
        if x.blocks.shape != x_hat.blocks.shape:
            raise ValueError("dimension mismatch between clean and perturbed matrices")
        return cls(x_hat.blocks - x.blocks)

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x.blocks))

    @property
    def block_dims(self):
        K, M, N = self.blocks.shape
        return M, N, K

    @property
    def strength_max(self):
        return float(np.abs(self.blocks).max())

    @property
    def matrix(self):
        return ImageMatrix(self.blocks)


@dataclass(frozen=True)
class RotationPair:
    """Orthonormal ``(M, M)`` left factor and ``(N, N)`` right factor.

    The same pair is applied to every channel block, i.e. the full rotation
    is ``blockdiag(left, ..., left) @ X @ blockdiag(right, ..., right).T``.
    """

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        for name in ("left", "right"):
            q = np.asarray(getattr(self, name), dtype=np.float64)
            if q.ndim != 2 or q.shape[0] != q.shape[1]:
                raise ValueError(f"{name} factor must be square, got shape {q.shape}")
            resid = np.abs(q.T @ q - np.eye(q.shape[0])).max()
            if resid > ORTHONORMAL_TOL:
                raise ValueError(f"{name} factor is not orthonormal (residual {resid:.3g})")
            object.__setattr__(self, name, readonly(q))

    @classmethod
    def identity(cls, M, N):
        return cls(np.eye(M), np.eye(N))

    @property
    def dims(self):
        return self.left.shape[0], self.right.shape[0]

    def inverse(self):
        return RotationPair(self.left.T, self.right.T)


def to_image_matrix(img):
    return ImageMatrix(np.moveaxis(img.pixels, -1, 0))


def to_image(x):
    """Inverse of :func:`to_image_matrix`; fails if entries leave ``[0, 1]``."""
    return Image(np.moveaxis(x.blocks, 0, -1))


def apply_perturbation(x, e):
    """``X + E`` blockwise. No clipping is applied."""
    if x.blocks.shape != e.blocks.shape:
        raise ValueError(
            f"dimension mismatch: matrix blocks {x.blocks.shape}, perturbation {e.blocks.shape}"
        )
    return ImageMatrix(x.blocks + e.blocks)


def norm_2(x):
    """Spectral norm: the largest singular value over all blocks."""
    return float(max(np.linalg.norm(b, 2) for b in x.blocks))


def norm_frobenius(x):
    return float(np.sqrt(np.sum(x.blocks ** 2)))


def norm_max(x):
    return float(np.abs(x.blocks).max())


def rotate(x, r):
    """Conjugate every block by the pair: ``left @ block @ right.T``."""
    M, N, _ = x.block_dims
    if r.dims != (M, N):
        raise ValueError(f"rotation dims {r.dims} do not match block dims {(M, N)}")
    return ImageMatrix(r.left @ x.blocks @ r.right.T)


def _haar_orthonormal(n, rng):
    q, rmat = np.linalg.qr(rng.standard_normal((n, n)))
    # sign fix makes the factor deterministic and Haar distributed
    return q * np.where(np.diag(rmat) < 0, -1.0, 1.0)


def random_rotation(M, N, seed=None):
    """Seeded random orthonormal pair from QR of Gaussian matrices."""
    if M < 1 or N < 1:
        raise ValueError("rotation dims must be positive")
    rng = np.random.default_rng(seed)
    return RotationPair(_haar_orthonormal(M, rng), _haar_orthonormal(N, rng))


def givens(n, i, j, theta):
    """``n x n`` Givens rotation acting in the ``(i, j)`` plane."""
    if not (0 <= i < n and 0 <= j < n and i != j):
        raise ValueError("givens plane indices must be distinct and in range")
    g = np.eye(n)
    c, s = np.cos(theta), np.sin(theta)
    g[i, i] = g[j, j] = c
    g[i, j] = -s
    g[j, i] = s
    return g


@dataclass(frozen=True)
class NormReport:
    norm_2: float
    norm_frobenius: float
    norm_max: float
    P: int
    two_le_frobenius: bool
    frobenius_le_sqrt_p_two: bool
    max_le_two: bool
    two_le_sqrt_size_max: bool
    values: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self):
        return (
            self.two_le_frobenius
            and self.frobenius_le_sqrt_p_two
            and self.max_le_two
            and self.two_le_sqrt_size_max
        )


def check_norm_inequalities(x, slack=NORM_SLACK):
    """Check the four standard norm inequalities on the block-diagonal matrix.

    ``||X||_2 <= ||X||_F <= sqrt(P) ||X||_2`` and
    ``||X||_max <= ||X||_2 <= sqrt(MK * NK) ||X||_max`` with ``P = K min(M, N)``.
    """
    M, N, K = x.block_dims
    P = x.rank_bound
    two, fro, mx = norm_2(x), norm_frobenius(x), norm_max(x)
    size = np.sqrt(float(M * K) * float(N * K))
    return NormReport(
        norm_2=two,
        norm_frobenius=fro,
        norm_max=mx,
        P=P,
        two_le_frobenius=two <= fro + slack,
        frobenius_le_sqrt_p_two=fro <= np.sqrt(P) * two + slack,
        max_le_two=mx <= two + slack,
        two_le_sqrt_size_max=two <= size * mx + slack,
        values={"sqrt_p_two": np.sqrt(P) * two, "sqrt_size_max": size * mx},
    )
