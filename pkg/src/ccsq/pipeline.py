"""Cross-validation protocols, ensembling, rescaling, fusion and reports."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetManifest,
    FoldPlan,
    make_random_folds,
    make_speaker_folds,
    merge_manifests,
)
from .errors import DivergenceError, ValidationError
from .metrics import MomentStats, ccc, evaluate_report, moments, scale_predictions
from .seqnet import (
    HeadSpec,
    LayerSpec,
    NetworkSpec,
    TrainConfig,
    Utterance,
    predict_utterance,
    train_fold,
)

__all__ = [
    "ExperimentConfig",
    "PredictionSet",
    "CVResult",
    "build_utterances",
    "run_cv",
    "predict_ensemble",
    "rescale_set",
    "fuse",
    "final_protocol",
    "report",
    "format_report",
    "load_experiment_config",
]

NORMALIZATIONS = ("cdf_adjust", "meanvar")
REGRESSION_TASKS = ("arousal", "valence")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run one cross-validated experiment.

    ``fold_plan`` may be left ``None``; ``run_cv`` then builds one from
    ``fold_strategy``, ``k`` and ``seed``.
    """

    spec: NetworkSpec
    train_config: TrainConfig
    tasks: tuple = ("arousal",)
    normalization: str = "cdf_adjust"
    adversarial: bool = False
    fold_strategy: str = "random"
    k: int = 6
    seed: int = 0
    fold_plan: FoldPlan | None = None

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValidationError("tasks must be non-empty")
        for t in tasks:
            if t not in REGRESSION_TASKS:
                raise ValidationError(f"unknown task {t!r}")
        if tuple(self.spec.regression_tasks) != tasks:
            raise ValidationError(
                f"network heads {self.spec.regression_tasks} do not match tasks {tasks}"
            )
        if self.normalization not in NORMALIZATIONS:
            raise ValidationError(f"normalization must be one of {NORMALIZATIONS}")
        if self.adversarial != self.spec.adversarial:
            raise ValidationError("adversarial training requires exactly one softmax speaker head")
        if self.adversarial and self.train_config.adversarial_lambda <= 0:
            raise ValidationError("adversarial runs need adversarial_lambda > 0")
        if self.fold_strategy not in ("random", "speaker"):
            raise ValidationError(f"fold strategy must be random or speaker, got {self.fold_strategy!r}")
        object.__setattr__(self, "tasks", tasks)

    def make_folds(self, manifest: DatasetManifest) -> FoldPlan:
        if self.fold_plan is not None:
            self.fold_plan.check(manifest)
            return self.fold_plan
        if self.fold_strategy == "speaker":
            return make_speaker_folds(manifest, self.k, self.seed)
        return make_random_folds(manifest, self.k, self.seed)


class PredictionSet:
    """Utterance-level predictions per task, with the models that produced them."""

    def __init__(self, values=None, provenance=None):
        self.values = {}
        self.provenance = {}
        for uid, per_task in (values or {}).items():
            self.values[uid] = {t: float(v) for t, v in per_task.items()}
        for uid, ids in (provenance or {}).items():
            self.provenance[uid] = tuple(ids)

    def add(self, uid, task, value, models):
        self.values.setdefault(uid, {})[task] = float(value)
        self.provenance[uid] = tuple(models)

    @property
    def ids(self):
        return list(self.values)

    def tasks(self):
        return sorted({t for v in self.values.values() for t in v})

    def task_ids(self, task):
        return [u for u, v in self.values.items() if task in v]

    def vector(self, task, ids=None):
        ids = self.task_ids(task) if ids is None else ids
        try:
            return np.array([self.values[u][task] for u in ids])
        except KeyError as exc:
            raise ValidationError(f"no {task} prediction for {exc.args[0]!r}") from None

    def n_models(self, uid):
        return len(self.provenance.get(uid, ())) or 1

    def __eq__(self, other):
        return isinstance(other, PredictionSet) and self.values == other.values

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["utterance_id", "task", "prediction", "n_models"])
        for uid in self.values:
            for task in sorted(self.values[uid]):
                w.writerow([uid, task, repr(self.values[uid][task]), self.n_models(uid)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, source="predictions") -> "PredictionSet":
        reader = csv.reader(io.StringIO(text))
        if next(reader, None) != ["utterance_id", "task", "prediction", "n_models"]:
            raise ValidationError(f"{source}: expected header utterance_id,task,prediction,n_models")
        ps = cls()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                uid, task, val, n = row
                value = float(val)
                n = int(n)
            except ValueError:
                raise ValidationError(f"{source} line {lineno}: malformed row") from None
            if task in ps.values.get(uid, {}):
                raise ValidationError(f"{source} line {lineno}: duplicate ({uid}, {task})")
            ps.add(uid, task, value, [f"m{i}" for i in range(n)])
        return ps


@dataclass
class CVResult:
    models: dict
    oof: PredictionSet
    train_stats: dict
    histories: dict = field(default_factory=dict)
    fold_plan: FoldPlan | None = None
    train_ids: dict = field(default_factory=dict)


def speaker_index(manifest: DatasetManifest):
    return {s: i for i, s in enumerate(manifest.speakers)}


def build_utterances(manifest: DatasetManifest, features: dict, tasks=("arousal",), speakers=None):
    """Pair manifest labels with feature matrices ``{utterance_id: (W, F)}``."""
    speakers = speakers if speakers is not None else speaker_index(manifest)
    out = []
    for r in manifest:
        if r.utterance_id not in features:
            raise ValidationError(f"no features for utterance {r.utterance_id!r}")
        x = np.asarray(features[r.utterance_id], dtype=np.float64)
        out.append(
            Utterance(
                r.utterance_id,
                x,
                {t: r.target(t) for t in tasks},
                speakers.get(r.speaker_id, -1),
            )
        )
    return out


def label_stats(manifest: DatasetManifest, tasks) -> dict:
    return {t: moments([r.target(t) for r in manifest]) for t in tasks}


def _train_one(args):
    i, train, val, spec, tcfg, task = args
    try:
        params, hist = train_fold(train, val, spec, tcfg, primary_task=task)
    except DivergenceError as exc:
        raise DivergenceError(f"fold {i}: {exc}", epoch=exc.epoch, fold=i) from None
    return i, params, hist


def _workers():
    try:
        return max(1, int(os.environ.get("CCSQ_THREADS", "1")))
    except ValueError:
        return 1


def run_cv(manifest: DatasetManifest, features: dict, config: ExperimentConfig) -> CVResult:
    """Train one model per fold, each validated and early-stopped on its held-out fold.

    Each utterance's out-of-fold prediction comes from the model that held
    it out.  ``train_stats`` are the label moments of the whole manifest.
    """
    plan = config.make_folds(manifest)
    utts = build_utterances(manifest, features, config.tasks)
    by_id = {u.uid: u for u in utts}
    jobs = []
    train_ids = {}
    for i in range(plan.k):
        val_ids = plan.fold_ids(i)
        held = set(val_ids)
        tr_ids = [u.uid for u in utts if u.uid not in held]
        train_ids[f"fold{i}"] = tuple(tr_ids)
        # distinct but reproducible seed per fold
        tcfg = TrainConfig(**{**config.train_config.to_dict(), "seed": config.train_config.seed + i})
        jobs.append((i, [by_id[u] for u in tr_ids], [by_id[u] for u in val_ids],
                     config.spec, tcfg, config.tasks[0]))
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    models, histories = {}, {}
    oof = PredictionSet()
    for i, params, hist in sorted(results, key=lambda r: r[0]):
        mid = f"fold{i}"
        models[mid] = params
        histories[mid] = hist
        for uid in plan.fold_ids(i):
            pred = predict_utterance(config.spec, params, by_id[uid].x)
            for t in config.tasks:
                oof.add(uid, t, pred[t], [mid])
    ordered = PredictionSet(
        {u.uid: oof.values[u.uid] for u in utts}, {u.uid: oof.provenance[u.uid] for u in utts}
    )
    return CVResult(models, ordered, label_stats(manifest, config.tasks), histories, plan, train_ids)


def _as_model_dict(models):
    if isinstance(models, dict):
        return dict(models)
    return {f"m{i:03d}": m for i, m in enumerate(models)}


def predict_ensemble(models, utts, tasks=None) -> PredictionSet:
    """Average ``predict_utterance`` over all models.

    ``models`` is a list or a ``{model_id: params}`` mapping; the sum runs in
    sorted model-id order so the result does not depend on input order.
    """
    models = _as_model_dict(models)
    if not models:
        raise ValidationError("predict_ensemble needs at least one model")
    specs = {m.spec for m in models.values()}
    if len(specs) != 1:
        raise ValidationError("ensemble members have different network specs")
    spec = specs.pop()
    tasks = tuple(tasks or spec.regression_tasks)
    ids = sorted(models)
    out = PredictionSet()
    for u in utts:
        x = u.x if isinstance(u, Utterance) else np.asarray(u[1])
        uid = u.uid if isinstance(u, Utterance) else u[0]
        acc = {t: 0.0 for t in tasks}
        for mid in ids:
            p = predict_utterance(spec, models[mid], x)
            for t in tasks:
                acc[t] += p[t]
        for t in tasks:
            out.add(uid, t, acc[t] / len(ids), ids)
    return out


def rescale_set(preds: PredictionSet, train_stats: dict) -> PredictionSet:
    """Rescale each task's predictions to the given label moments."""
    out = PredictionSet(
        {u: dict(v) for u, v in preds.values.items()}, dict(preds.provenance)
    )
    for task in preds.tasks():
        if task not in train_stats:
            raise ValidationError(f"no training statistics for task {task!r}")
        ids = preds.task_ids(task)
        if len(ids) < 2:
            raise ValidationError(f"need at least 2 {task} predictions to rescale")
        scaled = scale_predictions(preds.vector(task, ids), train_stats[task])
        for uid, v in zip(ids, scaled):
            out.values[uid][task] = float(v)
    return out


def fuse(a: PredictionSet, b: PredictionSet, task: str) -> PredictionSet:
    """Unweighted average of two prediction sets for one task."""
    ia, ib = set(a.task_ids(task)), set(b.task_ids(task))
    if ia != ib:
        diff = sorted(ia.symmetric_difference(ib))
        raise ValidationError(f"utterance sets differ for {task}: {diff}")
    if not ia:
        raise ValidationError(f"no {task} predictions to fuse")
    out = PredictionSet()
    for uid in a.task_ids(task):
        models = tuple(sorted(set(a.provenance.get(uid, ())) | set(b.provenance.get(uid, ()))))
        out.add(uid, task, (a.values[uid][task] + b.values[uid][task]) / 2.0, models)
    return out


def final_protocol(train_manifest, dev_manifest, features, config: ExperimentConfig, k=None):
    """Merge train and dev, refold into ``k`` folds and train one model per fold."""
    merged = merge_manifests(train_manifest, dev_manifest)
    cfg = ExperimentConfig(
        config.spec,
        config.train_config,
        config.tasks,
        config.normalization,
        config.adversarial,
        config.fold_strategy,
        k if k is not None else config.k,
        config.seed,
        None,
    )
    return run_cv(merged, features, cfg)


def report(preds: PredictionSet, gold: DatasetManifest, train_stats: dict, approach="model"):
    """One row per task: CC, CCC, CCC after rescaling to training moments, and
    CCC after rescaling to the evaluated set's own label moments."""
    rows = []
    gold_ids = {r.utterance_id: r for r in gold}
    for task in preds.tasks():
        ids = [u for u in preds.task_ids(task) if u in gold_ids]
        if not ids:
            raise ValidationError(f"no overlap between predictions and gold labels for {task}")
        missing = sorted(set(preds.task_ids(task)) - set(gold_ids))
        if missing:
            raise ValidationError(f"predictions without gold labels: {missing[:10]}")
        pred = preds.vector(task, ids)
        ref = np.array([gold_ids[u].target(task) for u in ids])
        rep = evaluate_report(pred, ref, train_stats[task])
        self_scaled = ccc(scale_predictions(pred, moments(ref)), ref)
        rows.append(
            {
                "approach": approach,
                "task": task,
                "cc": rep["cc"],
                "ccc": rep["ccc"],
                "scaled_ccc": rep["scaled_ccc"],
                "scaled_ccc_self": self_scaled,
                "n": rep["n"],
            }
        )
    return rows


def format_report(rows) -> str:
    head = f"{'approach':<24} {'task':<8} {'CC':>7} {'CCC':>7} {'ScaledCCC':>10} {'Scaled(self)':>12} {'n':>5}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['approach']:<24} {r['task']:<8} {r['cc']:>7.3f} {r['ccc']:>7.3f} "
            f"{r['scaled_ccc']:>10.3f} {r['scaled_ccc_self']:>12.3f} {r['n']:>5d}"
        )
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# experiment configuration documents


def _schema():
    text = resources.files("ccsq").joinpath("schema/experiment.schema.json").read_text("utf-8")
    return json.loads(text)


def _json_path(err):
    path = "$"
    for p in err.absolute_path:
        path += f"[{p}]" if isinstance(p, int) else f".{p}"
    return path


def parse_experiment_config(doc: dict, input_dim: int, n_speakers: int = 0, seed=None):
    """Validate a configuration document and build an ``ExperimentConfig``."""
    import jsonschema

    validator = jsonschema.Draft7Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ValidationError(f"config error at {_json_path(e)}: {e.message}")
    seed = int(doc.get("seed", 0) if seed is None else seed)
    tasks = tuple(doc.get("tasks", ["arousal"]))
    net = doc.get("network", {})
    head_kind = net.get("head", "identity")
    layers = tuple(LayerSpec(l["kind"], int(l["size"])) for l in net.get("layers", [{"kind": "blstm", "size": 16}]))
    adversarial = bool(doc.get("adversarial", False))
    heads = [HeadSpec(head_kind, 1, t) for t in tasks]
    if adversarial:
        if n_speakers < 2:
            raise ValidationError("config error at $.adversarial: needs at least 2 speakers")
        heads.append(HeadSpec("softmax", n_speakers, "speaker"))
    spec = NetworkSpec(int(input_dim), layers, tuple(heads))
    tr = dict(doc.get("train", {}))
    tr["seed"] = seed
    tcfg = TrainConfig(**tr)
    folds = doc.get("folds", {})
    return ExperimentConfig(
        spec,
        tcfg,
        tasks,
        doc.get("normalization", "cdf_adjust"),
        adversarial,
        folds.get("strategy", "random"),
        int(folds.get("k", 6)),
        seed,
        None,
    )


def load_experiment_config(path, input_dim, n_speakers=0, seed=None):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config error at $: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config error at $: expected a JSON object")
    return parse_experiment_config(doc, input_dim, n_speakers, seed)


def stats_to_json(stats: dict) -> str:
    return json.dumps({t: s.to_dict() for t, s in sorted(stats.items())}, sort_keys=True, indent=1) + "\n"


def stats_from_json(text: str) -> dict:
    try:
        doc = json.loads(text)
        return {t: MomentStats.from_dict(v) for t, v in doc.items()}
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ValidationError(f"malformed train-stats JSON: {exc}") from None
