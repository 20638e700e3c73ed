"""Utterance manifests, arousal remapping and cross-validation fold plans."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, RangeError, ValidationError

__all__ = [
    "UtteranceRecord",
    "DatasetManifest",
    "FoldPlan",
    "map_arousal",
    "load_manifest",
    "write_manifest",
    "make_random_folds",
    "make_speaker_folds",
    "merge_manifests",
]

MANIFEST_COLUMNS = (
    "utterance_id",
    "video_id",
    "speaker_id",
    "arousal",
    "valence",
    "feature_path",
    "arousal_range",
)
PARTITIONS = ("train", "dev", "test")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    video_id: str
    speaker_id: str
    arousal: float
    valence: float
    feature_path: str

    def __post_init__(self):
        for name in ("arousal", "valence"):
            v = getattr(self, name)
            if not (-1.0 <= v <= 1.0):
                raise RangeError(f"{name}={v!r} outside [-1, 1] for {self.utterance_id}")

    def target(self, task: str) -> float:
        if task not in ("arousal", "valence"):
            raise ValidationError(f"unknown task {task!r}")
        return getattr(self, task)


@dataclass(frozen=True)
class DatasetManifest:
    partition: str
    records: tuple

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ValidationError(f"unknown partition {self.partition!r}")
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ValidationError("manifest is empty")
        seen = set()
        paths = set()
        for r in self.records:
            if r.utterance_id in seen:
                raise ValidationError(f"duplicate utterance_id {r.utterance_id!r}")
            seen.add(r.utterance_id)
            if r.feature_path in paths:
                raise ValidationError(f"duplicate feature_path {r.feature_path!r}")
            paths.add(r.feature_path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self):
        return [r.utterance_id for r in self.records]

    @property
    def speakers(self):
        return sorted({r.speaker_id for r in self.records})

    def by_id(self):
        return {r.utterance_id: r for r in self.records}

    def subset(self, ids):
        lookup = self.by_id()
        return DatasetManifest(self.partition, tuple(lookup[i] for i in ids))


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of utterances to ``k`` folds."""

    k: int
    assignment: Mapping[str, int]
    speaker_disjoint: bool
    seed: int
    order: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be positive, got {self.k}")
        a = dict(self.assignment)
        for uid, f in a.items():
            if not 0 <= f < self.k:
                raise ValidationError(f"fold {f} for {uid!r} outside [0, {self.k})")
        counts = np.bincount(list(a.values()), minlength=self.k)
        if np.any(counts == 0):
            raise ValidationError(f"empty fold(s): {np.flatnonzero(counts == 0).tolist()}")
        object.__setattr__(self, "assignment", MappingProxyType(a))
        if not self.order:
            object.__setattr__(self, "order", tuple(a))

    def fold_ids(self, i: int) -> list:
        return [u for u in self.order if self.assignment[u] == i]

    def fold_sizes(self) -> list:
        return np.bincount(list(self.assignment.values()), minlength=self.k).tolist()

    def check(self, manifest: DatasetManifest):
        """Raise unless the plan covers exactly ``manifest`` and honors its flag."""
        ids = set(manifest.ids)
        if ids != set(self.assignment):
            diff = sorted(ids.symmetric_difference(self.assignment))
            raise ValidationError(f"fold plan does not match manifest: {diff[:10]}")
        if self.speaker_disjoint:
            owner = {}
            for r in manifest:
                f = self.assignment[r.utterance_id]
                if owner.setdefault(r.speaker_id, f) != f:
                    raise ValidationError(f"speaker {r.speaker_id!r} spans several folds")

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(f"# k={self.k} seed={self.seed} speaker_disjoint={str(self.speaker_disjoint).lower()}\n")
        buf.write("utterance_id,fold\n")
        for uid in self.order:
            buf.write(f"{uid},{self.assignment[uid]}\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "FoldPlan":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValidationError("fold plan: missing header comment")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        try:
            k = int(meta["k"])
            seed = int(meta["seed"])
            disjoint = {"true": True, "false": False}[meta["speaker_disjoint"]]
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"fold plan: bad header {lines[0]!r}") from exc
        rows = list(csv.reader(lines[1:]))
        if not rows or rows[0] != ["utterance_id", "fold"]:
            raise ValidationError("fold plan: expected header 'utterance_id,fold'")
        assignment = {}
        for lineno, row in enumerate(rows[1:], start=3):
            if len(row) != 2:
                raise ValidationError(f"fold plan line {lineno}: expected 2 fields")
            assignment[row[0]] = int(row[1])
        return cls(k, assignment, disjoint, seed, tuple(assignment))


def map_arousal(raw: float) -> float:
    """Map an arousal rating from [0, 1] onto [-1, 1]."""
    raw = float(raw)
    if not (0.0 <= raw <= 1.0):
        raise RangeError(f"arousal {raw!r} outside [0, 1]")
    return 2.0 * raw - 1.0


def _parse_float(text, what, lineno):
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"line {lineno}: {what} {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ValidationError(f"line {lineno}: {what} is not finite")
    return v


def load_manifest(path, partition: str = "train") -> DatasetManifest:
    """Read a manifest CSV.

    Arousal is remapped from [0, 1] when the row declares ``arousal_range=unit``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ValidationError(
                f"{path} line 1: header must be {','.join(MANIFEST_COLUMNS)}"
            )
        records = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValidationError(
                    f"{path} line {lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}"
                )
            uid, vid, spk, aro, val, fpath, rng = (c.strip() for c in row)
            if uid in seen:
                raise ValidationError(f"{path} line {lineno}: duplicate utterance_id {uid!r}")
            seen.add(uid)
            a = _parse_float(aro, "arousal", lineno)
            v = _parse_float(val, "valence", lineno)
            if rng == "unit":
                try:
                    a = map_arousal(a)
                except RangeError as exc:
                    raise RangeError(f"{path} line {lineno}: {exc}") from None
            elif rng == "signed":
                if not -1.0 <= a <= 1.0:
                    raise RangeError(f"{path} line {lineno}: arousal {a!r} outside [-1, 1]")
            else:
                raise ValidationError(
                    f"{path} line {lineno}: arousal_range must be 'unit' or 'signed', got {rng!r}"
                )
            if not -1.0 <= v <= 1.0:
                raise RangeError(f"{path} line {lineno}: valence {v!r} outside [-1, 1]")
            records.append(UtteranceRecord(uid, vid, spk, a, v, fpath))
    if not records:
        raise ValidationError(f"{path}: manifest has no records")
    return DatasetManifest(partition, tuple(records))


def write_manifest(manifest: DatasetManifest, path):
    """Write ``manifest`` with arousal in the signed range."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest:
            w.writerow([r.utterance_id, r.video_id, r.speaker_id, repr(r.arousal),
                        repr(r.valence), r.feature_path, "signed"])


def make_random_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldPlan:
    """Shuffle with a seeded generator, then deal records round-robin."""
    n = len(manifest)
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigurationError(f"{k} folds requested for {n} records")
    perm = np.random.default_rng(seed).permutation(n)
    ids = manifest.ids
    assignment = {ids[j]: pos % k for pos, j in enumerate(perm)}
    return FoldPlan(k, assignment, False, seed, tuple(ids))


def make_speaker_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldPlan:
    """Greedy speaker-disjoint folds balanced on utterance counts.

    Speakers are taken largest first (ties by speaker id) and each goes to
    the fold that currently holds the fewest utterances (ties by fold index).
    ``seed`` is recorded but the assignment does not depend on it.
    """
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    counts = {}
    for r in manifest:
        counts[r.speaker_id] = counts.get(r.speaker_id, 0) + 1
    if len(counts) < k:
        raise ConfigurationError(f"{k} folds requested but only {len(counts)} speakers")
    load = [0] * k
    fold_of = {}
    for spk in sorted(counts, key=lambda s: (-counts[s], s)):
        f = min(range(k), key=lambda i: (load[i], i))
        fold_of[spk] = f
        load[f] += counts[spk]
    assignment = {r.utterance_id: fold_of[r.speaker_id] for r in manifest}
    return FoldPlan(k, assignment, True, seed, tuple(manifest.ids))


def merge_manifests(a: DatasetManifest, b: DatasetManifest, partition: str = "train") -> DatasetManifest:
    overlap = sorted(set(a.ids) & set(b.ids))
    if overlap:
        raise ValidationError(f"utterance ids present in both manifests: {overlap[:10]}")
    return DatasetManifest(partition, a.records + b.records)
