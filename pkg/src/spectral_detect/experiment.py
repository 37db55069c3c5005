"""Detection-grid and compression experiments shared by the CLI and tests."""

import csv
import math

import numpy as np

from .attacks import AttackConfig, run_attack
from .compression import truncate_images
from .detector import score
from .models import TinyClassifier

__all__ = [
    "DEFAULT_MODELS",
    "default_model",
    "detection_grid",
    "write_rows",
    "restoration_rate",
    "text_histogram",
]

# desk-scale stand-ins for the two datasets
DEFAULT_MODELS = {
    "mnist": dict(arch="linear", epochs=5, learning_rate=0.5, batch_size=64),
    "cifar10": dict(arch="mlp", hidden=128, epochs=8, learning_rate=0.01, batch_size=64),
}


def default_model(dataset, X, y, seed=0):
    return TinyClassifier(seed=seed, **DEFAULT_MODELS[dataset]).fit(X, y)


def detection_grid(profile, model, X, y, kinds, eps_values, steps=10, step_size=None, mu=1.0,
                   seed=0, clean_control=None):
    """Attack ``X`` for every ``(kind, eps)`` and measure detection.

    Returns one row per cell, preceded by a ``kind="none"`` control row
    reporting the false positive rate on ``clean_control`` (``X`` if omitted).
    ``detection_rate`` is the share of attacked images flagged; ``fpr`` is
    the share of clean control images flagged.
    """
    control = X if clean_control is None else clean_control
    fpr = float(np.mean(~profile.contains(score(control, profile))))
    clean_pred = model.predict(X) if model is not None else None
    rows = [dict(kind="none", eps=0.0, n=len(control), detection_rate=fpr, fpr=fpr,
                 attack_success=0.0)]
    for kind in kinds:
        for eps in eps_values:
            cfg = AttackConfig(kind, eps, steps=steps, step_size=step_size, mu=mu, seed=seed)
            A = run_attack(model, X, y, cfg)
            flagged = ~profile.contains(score(A, profile))
            success = float(np.mean(model.predict(A) != clean_pred)) if model is not None else math.nan
            rows.append(dict(kind=kind, eps=float(eps), n=len(A),
                             detection_rate=float(np.mean(flagged)), fpr=fpr,
                             attack_success=success))
    return rows


def write_rows(fh, rows, fields=None):
    """CSV with a header row; floats use 17 significant digits."""
    fields = fields or list(rows[0])
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow(["%.17g" % r[f] if isinstance(r[f], float) else r[f] for f in fields])


def restoration_rate(model, X, X_adv, k):
    """Share of label-flipped attacked images whose rank-``k`` compression
    gets the clean prediction back. ``nan`` if no label flipped.
    """
    before = model.predict(X)
    flipped = model.predict(X_adv) != before
    if not flipped.any():
        return math.nan
    compressed, _ = truncate_images(X_adv[flipped], k)
    return float(np.mean(model.predict(compressed) == before[flipped]))


def text_histogram(groups, bins=20, width=40):
    """Text histogram of ``log10(rho)`` for named groups on shared bins.

    ``groups`` maps a name to an array of ``rho`` values; exact zeros get
    their own row since their logarithm is undefined.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in groups.items()}
    pos = np.concatenate([a[a > 0] for a in arrays.values()])
    lines, edges = [], np.zeros(1)
    if pos.size:
        lo, hi = np.log10(pos.min()), np.log10(pos.max())
        edges = np.linspace(lo, hi if hi > lo else lo + 1, bins + 1)
    for name, a in arrays.items():
        lines.append(f"{name} (n={a.size})")
        counts = []
        zeros = int(np.sum(a == 0))
        if pos.size:
            counts = np.histogram(np.log10(a[a > 0]), edges)[0]
        peak = max([zeros, *counts, 1])
        lines.append(f"  {'rho=0':>17} | {'#' * round(width * zeros / peak)} {zeros}")
        for c, e0, e1 in zip(counts, edges[:-1], edges[1:]):
            lines.append(f"  [{e0:+7.2f},{e1:+7.2f}) | {'#' * round(width * c / peak)} {c}")
    return "\n".join(lines) + "\n"
