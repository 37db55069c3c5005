"""Singular value / vector perturbation bounds and clean-vs-perturbed diagnostics.

For ``X_hat = X + E`` with merged spectra ``s`` and ``s_hat``:

* Weyl: ``|s_i - s_hat_i| <= ||E||_2`` for every index.
* Mirsky: ``||s - s_hat||_2 <= ||E||_F``.
* First order: ``s_hat_i ~= s_i + u_i^T E v_i`` with an ``O(||E||^2)`` residual.
* Gap bound on vector rotation:
  ``max(sin(u_i, u_hat_i), sin(v_i, v_hat_i)) <= 2 ||E|| / max(gap_left, gap_right)``.
  Vector pairs are matched by (channel, within-channel index).

Indices in this module are 1-based to line up with the detector's ``m``.
"""

import csv
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .image import ImageMatrix, Perturbation
from .svd import SvdResult, block_svd

__all__ = [
    "BOUND_SLACK",
    "MirskyCheck",
    "PerturbationReport",
    "weyl_check",
    "mirsky_check",
    "first_order_estimate",
    "wedin_bound",
    "perturbation_report",
    "spectral_change",
]

BOUND_SLACK = 1e-9
REL_FLOOR = 1e-12

MirskyCheck = namedtuple("MirskyCheck", ["lhs", "rhs", "ok"])


def _spectra_pair(s, s_hat):
    s = np.asarray(s, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s.shape != s_hat.shape:
        raise ValueError(f"spectrum length mismatch: {s.shape} vs {s_hat.shape}")
    return s, s_hat


def weyl_check(s, s_hat, e_norm2):
    """Per-index margins ``||E||_2 - |s_i - s_hat_i|`` (negative means violated)."""
    s, s_hat = _spectra_pair(s, s_hat)
    return e_norm2 - np.abs(s - s_hat)


def mirsky_check(s, s_hat, e_normF, slack=BOUND_SLACK):
    s, s_hat = _spectra_pair(s, s_hat)
    lhs = float(np.sqrt(np.sum((s - s_hat) ** 2)))
    return MirskyCheck(lhs, float(e_normF), lhs <= e_normF + slack)


def first_order_estimate(svd, e):
    """Predicted perturbed spectrum ``s_i + u_i^T E_c v_i`` in ``svd``'s order.

    ``E_c`` is the block of ``e`` belonging to the channel of triple ``i``.
    """
    M, N, K = svd.block_dims
    if e.block_dims != (M, N, K):
        raise ValueError(f"perturbation dims {e.block_dims} do not match {(M, N, K)}")
    Eb = e.blocks[svd.channel_of]
    return svd.values + np.einsum("im,imn,in->i", svd.left, Eb, svd.right)


def _neighbour_gap(values, gap="max"):
    # max (or min) of |s_i - s_{i+1}|, |s_i - s_{i-1}| over existing neighbours only
    values = np.asarray(values, dtype=np.float64)
    diff = np.abs(np.diff(values, axis=-1))
    if gap == "max":
        pad, combine = np.zeros(values.shape[:-1] + (1,)), np.maximum
    elif gap == "min":
        pad, combine = np.full(values.shape[:-1] + (1,), np.inf), np.minimum
    else:
        raise ValueError(f"gap must be 'max' or 'min', got {gap!r}")
    out = combine(np.concatenate([pad, diff], axis=-1), np.concatenate([diff, pad], axis=-1))
    return np.where(np.isinf(out), 0.0, out)


def wedin_bound(svd, i, e_norm2, gap="max"):
    """Upper bound on the rotation sine of the ``i``-th (1-based) vector pair.

    ``2 ||E||_2 / g`` where ``g`` is the larger neighbouring gap. ``gap="min"``
    uses the smaller gap instead, the conservative classical form. Boundary
    indices use their single neighbour. Returns ``inf`` when ``g`` is 0.
    """
    values = svd.values if isinstance(svd, SvdResult) else np.asarray(svd, dtype=np.float64)
    P = values.shape[0]
    if not 1 <= i <= P:
        raise IndexError(f"index {i} outside [1, {P}]")
    if e_norm2 == 0:
        return 0.0
    g = _neighbour_gap(values, gap)[i - 1] if P > 1 else 0.0
    return float(2.0 * e_norm2 / g) if g > 0 else float("inf")


def _merged_triples(blocks):
    # blocks: (n, K, M, N) -> merged values / vectors / channel / local index
    n, K, M, N = blocks.shape
    sigma, left, right = block_svd(blocks.reshape(n * K, M, N), True, K=K)
    p = sigma.shape[1]
    order = np.argsort(-sigma.reshape(n, K * p), axis=1, kind="stable")
    values = np.take_along_axis(sigma.reshape(n, K * p), order, axis=1)
    left = np.take_along_axis(left.reshape(n, K * p, M), order[:, :, None], axis=1)
    right = np.take_along_axis(right.reshape(n, K * p, N), order[:, :, None], axis=1)
    return values, left, right, order // p, order % p, order


def _sines(a, b):
    # |b - (a.b) a| equals sqrt(1 - (a.b)^2) for unit vectors without the
    # cancellation near 0 that the square-root form suffers
    c = np.einsum("...m,...m->...", a, b)
    return np.clip(np.linalg.norm(b - c[..., None] * a, axis=-1), 0.0, 1.0)


def _as_blocks(X):
    if isinstance(X, ImageMatrix):
        return X.blocks[None]
    X = np.asarray(X, dtype=np.float64)
    return np.ascontiguousarray(np.moveaxis(X, -1, 1))


def spectral_change(X, X_hat, slack=BOUND_SLACK, gap="max"):
    """Vectorised clean-vs-perturbed spectral comparison for a batch.

    ``X`` and ``X_hat`` are ``(n, M, N, K)`` arrays or single
    :class:`ImageMatrix` objects. Returns a dict of per-image / per-index
    arrays; see :class:`PerturbationReport` for the meaning of each column.
    """
    B, Bh = _as_blocks(X), _as_blocks(X_hat)
    if B.shape != Bh.shape:
        raise ValueError(f"dimension mismatch: {B.shape} vs {Bh.shape}")
    n, K, M, N = B.shape
    E = Bh - B

    s, u, v, ch, loc, _ = _merged_triples(B)
    sh, uh, vh, chh, _, order_h = _merged_triples(Bh)
    e_sigma, _, _ = block_svd(E.reshape(n * K, M, N), False, K=K)
    e2 = e_sigma.reshape(n, -1).max(axis=1)
    eF = np.sqrt(np.sum(E ** 2, axis=(1, 2, 3)))

    # vectors are compared with the same (channel, local index) triple of X_hat
    p = min(M, N)
    where_h = np.argsort(order_h, axis=1)
    partner = np.take_along_axis(where_h, ch * p + loc, axis=1)
    uh_p = np.take_along_axis(uh, partner[:, :, None], axis=1)
    vh_p = np.take_along_axis(vh, partner[:, :, None], axis=1)
    sin_u = _sines(u, uh_p)
    sin_v = _sines(v, vh_p)

    g = _neighbour_gap(s, gap)
    with np.errstate(divide="ignore", invalid="ignore"):
        wedin = np.where(g > 0, 2 * e2[:, None] / g, np.inf)
    wedin = np.where(e2[:, None] == 0, 0.0, wedin)
    applicable = (wedin <= 1) & (g > 2 * e2[:, None])
    measured = np.maximum(sin_u, sin_v)
    wedin_viol = applicable & (measured > wedin + slack)

    predicted = s.copy()
    for k in range(K):
        term = np.einsum("npm,nmq,npq->np", u, E[:, k], v)
        predicted += np.where(ch == k, term, 0.0)

    weyl_margin = e2[:, None] - np.abs(s - sh)
    mirsky_lhs = np.sqrt(np.sum((s - sh) ** 2, axis=1))

    # a triple "crossed" when its within-channel partner moved to another merged
    # index, or it sits strictly closer to a different perturbed value
    dist = np.abs(s[:, :, None] - sh[:, None, :])
    own = np.abs(s - sh)
    diag = np.arange(dist.shape[1])
    dist[:, diag, diag] = np.inf
    crossed = (partner != np.arange(K * p)) | (dist.min(axis=2) < own)

    return {
        "s": s,
        "s_hat": sh,
        "channel": ch,
        "rel_change": np.abs(sh - s) / np.maximum(s, REL_FLOOR),
        "sin_u": sin_u,
        "sin_v": sin_v,
        "wedin_bound": wedin,
        "wedin_applicable": applicable,
        "weyl_margin": weyl_margin,
        "first_order_residual": np.abs(sh - predicted),
        "crossed": crossed,
        "e_norm2": e2,
        "e_normF": eF,
        "mirsky_lhs": mirsky_lhs,
        "mirsky_rhs": eF,
        "weyl_violations": np.sum(weyl_margin < -slack, axis=1),
        "mirsky_violation": (mirsky_lhs > eF + slack).astype(np.int64),
        "wedin_violations": np.sum(wedin_viol, axis=1),
    }


ROW_FIELDS = (
    "index", "channel", "s", "s_hat", "rel_change", "sin_u", "sin_v",
    "wedin_bound", "wedin_applicable", "weyl_margin", "first_order_residual", "crossed",
)


@dataclass(frozen=True)
class PerturbationReport:
    """Per-index spectral change between a clean and a perturbed matrix."""

    columns: dict = field(repr=False)
    mirsky_lhs: float
    mirsky_rhs: float
    e_norm2: float
    e_normF: float
    weyl_violations: int
    mirsky_violation: int
    wedin_violations: int

    @property
    def violations(self):
        return self.weyl_violations + self.mirsky_violation + self.wedin_violations

    @property
    def P(self):
        return len(self.columns["index"])

    def __getitem__(self, name):
        return self.columns[name]

    def to_csv(self, fh):
        """Write one row per index; summary values repeat on every row."""
        w = csv.writer(fh, lineterminator="\n")
        summary = ("e_norm2", "e_normF", "mirsky_lhs", "mirsky_rhs", "violations")
        w.writerow(ROW_FIELDS + summary)
        tail = [_fmt(self.e_norm2), _fmt(self.e_normF), _fmt(self.mirsky_lhs),
                _fmt(self.mirsky_rhs), self.violations]
        for r in range(self.P):
            w.writerow([_fmt(self.columns[f][r]) for f in ROW_FIELDS] + tail)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    return "%.17g" % x


def perturbation_report(x, x_hat, slack=BOUND_SLACK, gap="max"):
    """Full :class:`PerturbationReport` for one clean / perturbed pair."""
    if isinstance(x_hat, Perturbation):
        x_hat = ImageMatrix(x.blocks + x_hat.blocks)
    if x.blocks.shape != x_hat.blocks.shape:
        raise ValueError("dimension mismatch between clean and perturbed matrices")
    c = spectral_change(x, x_hat, slack, gap)
    P = c["s"].shape[1]
    columns = {"index": np.arange(1, P + 1)}
    for f in ROW_FIELDS[1:]:
        columns[f] = c[f][0]
    return PerturbationReport(
        columns=columns,
        mirsky_lhs=float(c["mirsky_lhs"][0]),
        mirsky_rhs=float(c["mirsky_rhs"][0]),
        e_norm2=float(c["e_norm2"][0]),
        e_normF=float(c["e_normF"][0]),
        weyl_violations=int(c["weyl_violations"][0]),
        mirsky_violation=int(c["mirsky_violation"][0]),
        wedin_violations=int(c["wedin_violations"][0]),
    )
