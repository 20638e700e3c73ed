"""Per-partition feature normalization.

Two modes: rank-based Gaussianization (``cdf_adjust``), which maps each
feature's empirical distribution onto the standard normal, and classic
mean/variance standardization.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import RangeError, ValidationError

__all__ = [
    "PartitionFeatureTable",
    "NormStats",
    "probit",
    "cdf_adjust",
    "meanvar_standardize",
    "apply_stats",
    "fit_stats",
    "DEGENERATE_STD",
]

DEGENERATE_STD = 1e-12

# Wichura (1988), algorithm AS241 PPND16; relative accuracy about 1e-16.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coef, x):
    acc = np.zeros_like(x)
    for c in reversed(coef):
        acc = acc * x + c
    return acc


def probit(p):
    """Inverse of the standard normal CDF.

    Accepts a scalar or array; every entry must lie strictly inside (0, 1).
    """
    arr = np.asarray(p, dtype=np.float64)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        bad = arr[~((arr > 0.0) & (arr < 1.0))].ravel()[0]
        raise RangeError(f"probit argument {bad!r} outside (0, 1)")
    q = arr - 0.5
    out = np.empty_like(q)

    central = np.abs(q) <= 0.425
    if np.any(central):
        qc = q[central]
        r = 0.180625 - qc * qc
        out[central] = qc * _poly(_A, r) / _poly(_B, r)

    tail = ~central
    if np.any(tail):
        qt = q[tail]
        r = np.where(qt < 0, arr[tail], 1.0 - arr[tail])
        r = np.sqrt(-np.log(r))
        near = r <= 5.0
        val = np.empty_like(r)
        rn = r[near] - 1.6
        val[near] = _poly(_C, rn) / _poly(_D, rn)
        rf = r[~near] - 5.0
        val[~near] = _poly(_E, rf) / _poly(_F, rf)
        out[tail] = np.where(qt < 0, -val, val)

    if np.ndim(p) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PartitionFeatureTable:
    """All windows of all utterances of one partition, stacked row-wise.

    ``index`` maps each row back to ``(utterance_id, window)``.
    """

    rows: np.ndarray
    partition: str = "train"
    index: tuple = ()
    feature_names: tuple = ()
    flags: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        r = np.array(self.rows, dtype=np.float64)
        if r.ndim != 2:
            raise ValidationError(f"feature table must be 2-D, got shape {r.shape}")
        if r.shape[0] < 2:
            raise ValidationError(f"feature table needs N >= 2 rows, got {r.shape[0]}")
        if not np.all(np.isfinite(r)):
            raise ValidationError("feature table contains NaN or Inf")
        if self.index and len(self.index) != r.shape[0]:
            raise ValidationError("row index length does not match table")
        if self.feature_names and len(self.feature_names) != r.shape[1]:
            raise ValidationError("feature name count does not match table width")
        r.setflags(write=False)
        object.__setattr__(self, "rows", r)
        object.__setattr__(self, "index", tuple(self.index))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def shape(self):
        return self.rows.shape

    def replace_rows(self, rows, **flags):
        return PartitionFeatureTable(rows, self.partition, self.index, self.feature_names, flags)

    @classmethod
    def from_sequences(cls, seqs, partition="train"):
        """Stack ``{utterance_id: FunctionalSequence}`` in the mapping's order."""
        blocks, index, names = [], [], None
        for uid, seq in seqs.items():
            if names is None:
                names = seq.feature_names
            elif len(seq.feature_names) != len(names):
                raise ValidationError(
                    f"{uid}: width {len(seq.feature_names)} differs from {len(names)}"
                )
            blocks.append(seq.vectors)
            index.extend((uid, w) for w in range(seq.n_windows))
        if not blocks:
            raise ValidationError("no sequences to stack")
        return cls(np.vstack(blocks), partition, tuple(index), names or ())

    def split(self):
        """Inverse of ``from_sequences``: ``{utterance_id: (W, F) array}``."""
        out = {}
        for row, (uid, _) in zip(self.rows, self.index):
            out.setdefault(uid, []).append(row)
        return {u: np.vstack(r) for u, r in out.items()}


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    variance: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64).ravel()
        v = np.asarray(self.variance, dtype=np.float64).ravel()
        if m.shape != v.shape:
            raise ValidationError("mean and variance lengths differ")
        if np.any(v < 0):
            raise ValidationError("negative variance in stats")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variance", v)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def std(self):
        return np.sqrt(self.variance)

    @property
    def degenerate(self):
        return self.std < DEGENERATE_STD

    def dumps(self) -> str:
        names = self.feature_names or tuple(f"f{i}" for i in range(self.mean.size))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "mean", "variance"])
        for n, m, v in zip(names, self.mean, self.variance):
            w.writerow([n, repr(float(m)), repr(float(v))])
        return buf.getvalue()

    def to_csv(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_csv(cls, path):
        names, means, vars_ = [], [], []
        with Path(path).open(encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["feature", "mean", "variance"]:
                raise ValidationError(f"{path}: expected header feature,mean,variance")
            for lineno, row in enumerate(reader, start=2):
                try:
                    names.append(row[0])
                    means.append(float(row[1]))
                    vars_.append(float(row[2]))
                except (IndexError, ValueError):
                    raise ValidationError(f"{path} line {lineno}: malformed row") from None
        return cls(np.array(means), np.array(vars_), tuple(names))


def _as_table(table):
    if isinstance(table, PartitionFeatureTable):
        return table
    return PartitionFeatureTable(table)


def cdf_adjust(table) -> PartitionFeatureTable:
    """Rank-Gaussianize each column: ``probit((rank - 0.5) / N)``, ties averaged."""
    t = _as_table(table)
    n = t.rows.shape[0]
    ranks = rankdata(t.rows, method="average", axis=0)
    return t.replace_rows(probit((ranks - 0.5) / n), mode="cdf")


def fit_stats(table) -> NormStats:
    t = _as_table(table)
    return NormStats(t.rows.mean(axis=0), t.rows.var(axis=0), t.feature_names)


def apply_stats(table, stats: NormStats) -> PartitionFeatureTable:
    """Standardize with externally supplied per-feature moments."""
    t = _as_table(table)
    if t.rows.shape[1] != stats.mean.size:
        raise ValidationError(
            f"table has {t.rows.shape[1]} features, stats have {stats.mean.size}"
        )
    sd = stats.std
    degenerate = sd < DEGENERATE_STD
    out = (t.rows - stats.mean) / np.where(degenerate, 1.0, sd)
    out[:, degenerate] = 0.0
    return t.replace_rows(out, mode="meanvar", degenerate=np.flatnonzero(degenerate).tolist())


def meanvar_standardize(table):
    """Z-score each column with its own population moments.

    Columns whose std is below 1e-12 become zeros and are listed in the
    output table's ``flags["degenerate"]``.
    """
    t = _as_table(table)
    stats = fit_stats(t)
    return apply_stats(t, stats), stats


def normalize_partition(table, mode: str, stats: NormStats | None = None):
    """Dispatch on ``mode``; returns ``(table, stats_or_None)``."""
    if mode == "cdf":
        return cdf_adjust(table), None
    if mode == "meanvar":
        if stats is not None:
            return apply_stats(table, stats), stats
        return meanvar_standardize(table)
    raise ValidationError(f"unknown normalization mode {mode!r}")


def probit_bound(n: int) -> float:
    """Largest magnitude ``cdf_adjust`` can emit for ``n`` rows."""
    return -probit(0.5 / n) if n > 1 else 0.0
