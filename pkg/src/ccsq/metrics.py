"""Agreement metrics and the concordance training loss.

All moments are population moments (divide by N).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStatisticsError, ValidationError

__all__ = [
    "MomentStats",
    "moments",
    "pearson_cc",
    "ccc",
    "scale_predictions",
    "ccc_loss_grad",
    "categorical_cross_entropy",
    "evaluate_report",
    "report_json",
]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MomentStats:
    """Mean, population variance and count of a series."""

    mean: float
    variance: float
    count: int

    def __post_init__(self):
        if self.variance < 0:
            raise ValidationError(f"variance must be >= 0, got {self.variance}")
        if self.count < 1:
            raise ValidationError(f"count must be positive, got {self.count}")

    def to_dict(self):
        return {"mean": self.mean, "variance": self.variance, "count": self.count}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean"]), float(d["variance"]), int(d["count"]))


def moments(x) -> MomentStats:
    x = np.asarray(x, dtype=np.float64)
    return MomentStats(float(x.mean()), float(x.var()), int(x.size))


def _paired(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.size} predictions vs {y.size} references")
    if x.size < 2:
        raise ValidationError("paired series need at least 2 elements")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("paired series contain NaN or Inf")
    return x, y


def _stats(x, y):
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx = float(np.dot(dx, dx) / x.size)
    vy = float(np.dot(dy, dy) / y.size)
    cov = float(np.dot(dx, dy) / x.size)
    return float(mx), float(my), vx, vy, cov


def pearson_cc(x, y) -> float:
    """Pearson correlation of predictions ``x`` and references ``y``."""
    x, y = _paired(x, y)
    _, _, vx, vy, cov = _stats(x, y)
    if vx <= 0.0 or vy <= 0.0:
        raise DegenerateStatisticsError("pearson_cc undefined for a constant series")
    r = cov / math.sqrt(vx * vy)
    return min(1.0, max(-1.0, r))


def ccc(x, y) -> float:
    """Lin's concordance correlation coefficient.

    ``2 cov / (var_x + var_y + (mean_x - mean_y)**2)``
    """
    x, y = _paired(x, y)
    mx, my, vx, vy, cov = _stats(x, y)
    den = vx + vy + (mx - my) ** 2
    if den <= 0.0:
        raise DegenerateStatisticsError("ccc undefined: both series constant and equal")
    return 2.0 * cov / den


def scale_predictions(pred, target: MomentStats) -> np.ndarray:
    """Affinely map ``pred`` onto the mean and variance in ``target``."""
    pred = np.asarray(pred, dtype=np.float64)
    v = float(pred.var())
    if v <= 0.0:
        raise DegenerateStatisticsError("cannot rescale constant predictions")
    if target.variance <= 0.0:
        raise DegenerateStatisticsError("target variance must be positive")
    return (pred - pred.mean()) * math.sqrt(target.variance / v) + target.mean


def ccc_loss_grad(pred, ref):
    """Return ``(1 - ccc(pred, ref), d loss / d pred)``.

    With n = len(pred) and D the ccc denominator::

        dccc/dx_i = 2/n * [(y_i - my) * D - 2 cov * ((x_i - mx) + (mx - my))] / D**2
    """
    x, y = _paired(pred, ref)
    n = x.size
    mx, my, vx, vy, cov = _stats(x, y)
    den = vx + vy + (mx - my) ** 2
    if den <= 0.0:
        raise DegenerateStatisticsError("ccc undefined: both series constant and equal")
    num = 2.0 * cov
    dnum = (2.0 / n) * (y - my)
    dden = (2.0 / n) * ((x - mx) + (mx - my))
    dccc = (dnum * den - num * dden) / (den * den)
    return 1.0 - num / den, -dccc


def categorical_cross_entropy(probs, label: int) -> float:
    """``-ln probs[label]`` with the probability floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError("probability vector must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError(f"probabilities sum to {p.sum()!r}, expected 1")
    if not 0 <= int(label) < p.size:
        raise ValidationError(f"label {label} outside [0, {p.size})")
    return -math.log(max(float(p[int(label)]), PROB_FLOOR))


def evaluate_report(pred, ref, train_stats: MomentStats) -> dict:
    """CC, CCC and CCC after rescaling ``pred`` to ``train_stats``."""
    pred, ref = _paired(pred, ref)
    return {
        "cc": pearson_cc(pred, ref),
        "ccc": ccc(pred, ref),
        "scaled_ccc": ccc(scale_predictions(pred, train_stats), ref),
        "n": int(pred.size),
    }


def report_json(report: dict) -> str:
    return json.dumps(
        {k: report[k] for k in ("cc", "ccc", "scaled_ccc", "n")}, sort_keys=True
    )
