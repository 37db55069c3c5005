"""Tail-energy detector: calibrate thresholds on clean images, then classify.

The statistic is ``rho = sum_{i >= m} s_i**2`` over the merged spectrum
(``m`` is 1-based). Calibration picks ``m`` from a relative cutoff ``alpha``
and sets ``[L, U]`` to nearest-rank percentiles of clean ``rho`` values. A
new image is clean iff ``L <= rho <= U``.
"""

import csv
import enum
import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .image import Image, ImageMatrix
from .svd import SvdResult, singular_values
from .validation import check_images

__all__ = [
    "PROFILE_VERSION",
    "CalibrationError",
    "ProfileFormatError",
    "CalibrationProfile",
    "Label",
    "Verdict",
    "DetectionReport",
    "nearest_rank",
    "coverage_index",
    "select_m",
    "rho",
    "calibrate",
    "classify",
    "evaluate",
    "save_profile",
    "load_profile",
    "SpectralDetector",
]

PROFILE_VERSION = 1
MIN_TRAIN = 100


class CalibrationError(ValueError):
    """Calibration cannot produce a valid profile for this data."""


class ProfileFormatError(ValueError):
    """A profile file is malformed or from an unsupported version."""


def _spectra(spectra):
    # list of SvdResult / Image / ImageMatrix, or an (n, P) array of values
    if isinstance(spectra, np.ndarray) and spectra.ndim == 2:
        return np.asarray(spectra, dtype=np.float64)
    rows = []
    for s in spectra:
        if isinstance(s, SvdResult):
            rows.append(s.values)
        elif isinstance(s, ImageMatrix):
            rows.append(singular_values(s)[0])
        elif isinstance(s, Image):
            rows.append(singular_values(s.pixels[None])[0])
        else:
            rows.append(np.asarray(s, dtype=np.float64))
    if not rows:
        raise ValueError("no spectra given")
    if len({r.shape for r in rows}) != 1:
        raise ValueError("spectra have different lengths")
    return np.vstack(rows)


def nearest_rank(values, p):
    """Nearest-rank percentile: the ``ceil(p n / 100)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must lie in [0, 100], got {p}")
    # round first so that e.g. 5 * 100 / 100 never lands on 5.000000001
    k = max(1, math.ceil(round(p * n / 100.0, 9)))
    return float(v[k - 1])


def _first_below(values, alpha):
    # 1-based smallest i with s_i <= alpha * s_1; P + 1 when none
    hit = values <= alpha * values[:, :1]
    P = values.shape[1]
    return np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, P + 1)


def coverage_index(mj, coverage):
    """Smallest ``m`` with ``m_j <= m`` for at least ``coverage`` of the ``m_j``."""
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must lie in (0, 1], got {coverage}")
    mj = np.sort(np.asarray(mj))
    need = max(1, math.ceil(round(coverage * mj.size, 9)))
    return int(mj[need - 1])


def _select_m(values, alpha, coverage):
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    live = values[:, 0] > 0
    skipped = int(np.sum(~live))
    if not live.any():
        raise CalibrationError("every spectrum is all-zero")
    m = coverage_index(_first_below(values[live], alpha), coverage)
    P = values.shape[1]
    if m > P:
        raise CalibrationError(
            f"no m <= P={P} reaches s_m <= {alpha} * s_1 for {coverage:.0%} of images"
        )
    return m, skipped


def select_m(spectra, alpha=0.01, coverage=0.95):
    """Smallest 1-based ``m`` such that ``s_m <= alpha * s_1`` holds for a
    ``coverage`` fraction of images.

    Images with an all-zero spectrum are skipped with a warning.
    """
    m, skipped = _select_m(_spectra(spectra), alpha, coverage)
    if skipped:
        warnings.warn(f"skipped {skipped} all-zero spectra", RuntimeWarning, stacklevel=2)
    return m


def rho(svd, m):
    """Tail energy ``sum_{i >= m} s_i**2`` (1-based ``m``).

    ``svd`` may be an :class:`SvdResult`, one spectrum, or an ``(n, P)``
    array of spectra (giving ``n`` values).
    """
    values = svd.values if isinstance(svd, SvdResult) else np.asarray(svd, dtype=np.float64)
    P = values.shape[-1]
    if not 1 <= m <= P:
        raise ValueError(f"m must lie in [1, {P}], got {m}")
    out = np.sum(values[..., m - 1:] ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CalibrationProfile:
    """Persisted detector state."""

    alpha: float
    m: int
    L: float
    U: float
    P: int
    M: int
    N: int
    K: int
    percentile_lo: float = 5.0
    percentile_hi: float = 95.0
    train_size: int = 0
    dataset_label: str = ""
    version: int = PROFILE_VERSION

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if min(self.M, self.N, self.K) < 1 or self.P != self.K * min(self.M, self.N):
            raise ValueError(f"P={self.P} inconsistent with dims {(self.M, self.N, self.K)}")
        if not 1 <= self.m <= self.P:
            raise ValueError(f"m must lie in [1, {self.P}], got {self.m}")
        if not 0 <= self.L <= self.U:
            raise ValueError(f"thresholds must satisfy 0 <= L <= U, got L={self.L}, U={self.U}")
        if not 0 <= self.percentile_lo <= self.percentile_hi <= 100:
            raise ValueError("percentiles must satisfy 0 <= lo <= hi <= 100")
        if "\n" in self.dataset_label or "\r" in self.dataset_label:
            raise ValueError("dataset_label must be a single line")

    @property
    def dims(self):
        return self.M, self.N, self.K

    @property
    def profile_id(self):
        """Short content hash identifying this profile."""
        return hashlib.sha256(_profile_text(self).encode()).hexdigest()[:12]

    def contains(self, r):
        """Elementwise clean test ``L <= r <= U``."""
        r = np.asarray(r, dtype=np.float64)
        return (self.L <= r) & (r <= self.U)


class Label(str, enum.Enum):
    CLEAN = "clean"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class Verdict:
    rho: float
    label: Label
    profile_id: str

    @property
    def is_adversarial(self):
        return self.label is Label.ADVERSARIAL


@dataclass(frozen=True)
class DetectionReport:
    """Detection counts and per-image rows ``(image_id, rho, verdict, truth)``.

    ``image_id`` runs over the clean images first, then the adversarial ones.
    """

    n_clean: int
    flagged_clean: int
    n_adversarial: int
    flagged_adversarial: int
    rows: list = field(repr=False)

    @property
    def detection_rate(self):
        return self.flagged_adversarial / self.n_adversarial

    @property
    def false_positive_rate(self):
        return self.flagged_clean / self.n_clean

    def to_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "rho", "verdict", "truth"])
        for image_id, r, verdict, truth in self.rows:
            w.writerow([image_id, "%.17g" % r, verdict, truth])


def _batch(images, dims=None):
    if isinstance(images, (Image, ImageMatrix)):
        images = [images]
    if isinstance(images, (list, tuple)):
        images = np.stack([
            im.pixels if isinstance(im, Image) else np.moveaxis(im.blocks, 0, -1)
            for im in images
        ]) if images else np.empty((0,))
    X = np.asarray(images, dtype=np.float64)
    if X.size == 0:
        raise ValueError("empty image batch")
    return check_images(X, dims, allow_single=dims is not None)


def calibrate(train, alpha=0.01, percentile_lo=5.0, percentile_hi=95.0, coverage=0.95,
              min_train=MIN_TRAIN, dataset_label=""):
    """Fit a :class:`CalibrationProfile` on clean training images.

    Parameters
    ----------
    train : ndarray (n, M, N, K) or list of Image
    alpha : float
        Relative cutoff selecting ``m``.
    percentile_lo, percentile_hi : float
        Nearest-rank percentiles of clean ``rho`` giving ``L`` and ``U``.
    min_train : int
        Minimum number of images accepted.
    """
    X = _batch(train)
    n, M, N, K = X.shape
    if n < min_train:
        raise CalibrationError(f"need at least {min_train} training images, got {n}")
    values = singular_values(X)
    m, skipped = _select_m(values, alpha, coverage)
    if skipped:
        warnings.warn(f"skipped {skipped} all-zero spectra when selecting m",
                      RuntimeWarning, stacklevel=2)
    r = np.sort(rho(values, m))
    return CalibrationProfile(
        alpha=float(alpha), m=m,
        L=nearest_rank(r, percentile_lo), U=nearest_rank(r, percentile_hi),
        P=values.shape[1], M=M, N=N, K=K,
        percentile_lo=float(percentile_lo), percentile_hi=float(percentile_hi),
        train_size=n, dataset_label=dataset_label,
    )


def score(images, profile):
    """``rho`` for a batch of images under ``profile``'s ``m``."""
    X = _batch(images, profile.dims)
    return rho(singular_values(X), profile.m)


def classify(img, profile):
    """Verdict for one image (or a list of verdicts for a batch)."""
    single = isinstance(img, (Image, ImageMatrix)) or np.shape(img) == profile.dims
    r = score(img, profile)
    pid = profile.profile_id
    clean = profile.contains(r)
    verdicts = [Verdict(float(v), Label.CLEAN if c else Label.ADVERSARIAL, pid)
                for v, c in zip(r, clean)]
    return verdicts[0] if single else verdicts


def evaluate(clean, adversarial, profile):
    """Detection report for a clean set and an adversarial set."""
    r_clean = score(clean, profile)
    r_adv = score(adversarial, profile)
    f_clean = ~profile.contains(r_clean)
    f_adv = ~profile.contains(r_adv)
    rows = []
    for truth, rs, flags in (("clean", r_clean, f_clean), ("adversarial", r_adv, f_adv)):
        for r, f in zip(rs, flags):
            verdict = Label.ADVERSARIAL.value if f else Label.CLEAN.value
            rows.append((len(rows), float(r), verdict, truth))
    return DetectionReport(
        n_clean=len(r_clean), flagged_clean=int(f_clean.sum()),
        n_adversarial=len(r_adv), flagged_adversarial=int(f_adv.sum()),
        rows=rows,
    )


_INT_KEYS = ("version", "m", "P", "M", "N", "K", "train_size")
_FLOAT_KEYS = ("alpha", "L", "U", "percentile_lo", "percentile_hi")
_KEYS = ("version", "dataset_label", "alpha", "m", "L", "U", "P", "M", "N", "K",
         "percentile_lo", "percentile_hi", "train_size")


def _profile_text(profile):
    d = asdict(profile)
    lines = []
    for k in _KEYS:
        v = d[k]
        lines.append(f"{k} = {'%.17g' % v if k in _FLOAT_KEYS else v}")
    return "\n".join(lines) + "\n"


def save_profile(profile, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_profile_text(profile))


def load_profile(path):
    """Parse a ``key = value`` profile file, rejecting unknown or missing keys."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    d = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ProfileFormatError(f"line {lineno}: expected 'key = value'")
        if key not in _KEYS:
            raise ProfileFormatError(f"line {lineno}: unknown key {key!r}")
        if key in d:
            raise ProfileFormatError(f"line {lineno}: duplicate key {key!r}")
        try:
            d[key] = int(value) if key in _INT_KEYS else float(value) if key in _FLOAT_KEYS else value
        except ValueError:
            raise ProfileFormatError(f"line {lineno}: bad value for {key}: {value!r}") from None
    missing = [k for k in _KEYS if k not in d]
    if missing:
        raise ProfileFormatError(f"missing keys: {', '.join(missing)}")
    if d["version"] != PROFILE_VERSION:
        raise ProfileFormatError(f"unsupported profile version {d['version']}")
    try:
        return CalibrationProfile(**d)
    except ValueError as exc:
        raise ProfileFormatError(f"invalid profile: {exc}") from None


class SpectralDetector(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`calibrate` / :func:`classify`.

    ``predict`` returns 1 for adversarial and 0 for clean. ``fit`` ignores
    ``y``; calibration uses clean images only.

    Parameters
    ----------
    alpha : float, default=0.01
    coverage : float, default=0.95
    percentile_lo, percentile_hi : float, default=5, 95
    min_train : int, default=100
    image_shape : tuple, optional
        ``(M, N, K)``; needed only for flattened input.
    dataset_label : str, default=""

    Attributes
    ----------
    profile_ : CalibrationProfile
    m_, lower_, upper_ : int, float, float
    """

    def __init__(self, alpha=0.01, coverage=0.95, percentile_lo=5.0, percentile_hi=95.0,
                 min_train=MIN_TRAIN, image_shape=None, dataset_label=""):
        self.alpha = alpha
        self.coverage = coverage
        self.percentile_lo = percentile_lo
        self.percentile_hi = percentile_hi
        self.min_train = min_train
        self.image_shape = image_shape
        self.dataset_label = dataset_label

    def fit(self, X, y=None):
        X = check_images(X, self.image_shape)
        self.profile_ = calibrate(
            X, alpha=self.alpha, coverage=self.coverage,
            percentile_lo=self.percentile_lo, percentile_hi=self.percentile_hi,
            min_train=self.min_train, dataset_label=self.dataset_label,
        )
        self._set_fitted()
        return self

    @classmethod
    def from_profile(cls, profile):
        est = cls(alpha=profile.alpha, percentile_lo=profile.percentile_lo,
                  percentile_hi=profile.percentile_hi, image_shape=profile.dims,
                  dataset_label=profile.dataset_label)
        est.profile_ = profile
        est._set_fitted()
        return est

    def _set_fitted(self):
        p = self.profile_
        self.m_, self.lower_, self.upper_ = p.m, p.L, p.U
        self.classes_ = np.array([0, 1])

    def _check(self, X):
        check_is_fitted(self, "profile_")
        return check_images(X, self.image_shape or self.profile_.dims)

    def score_samples(self, X):
        """``rho`` per image."""
        X = self._check(X)
        if X.shape[1:] != self.profile_.dims:
            raise ValueError(f"image dims {X.shape[1:]} do not match profile {self.profile_.dims}")
        return rho(singular_values(X), self.m_)

    def decision_function(self, X):
        """Distance outside ``[L, U]``; positive means adversarial, ties are clean."""
        r = self.score_samples(X)
        return np.maximum(self.lower_ - r, r - self.upper_)

    def predict(self, X):
        r = self.score_samples(X)
        return (~self.profile_.contains(r)).astype(np.int64)

    def classify(self, X):
        check_is_fitted(self, "profile_")
        return classify(self._check(X), self.profile_)

    def evaluate(self, clean, adversarial):
        check_is_fitted(self, "profile_")
        return evaluate(self._check(clean), self._check(adversarial), self.profile_)
