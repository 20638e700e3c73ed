"""Command-line front end.

Every stage reads and writes plain files so it can be run and inspected on
its own.  Exit codes: 0 success, 1 usage, 2 input validation, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import features as feat
from .dataset import FoldPlan, load_manifest, make_random_folds, make_speaker_folds
from .errors import CcsqError, UsageError, ValidationError
from .normalize import NormStats, PartitionFeatureTable, normalize_partition
from .pipeline import (
    PredictionSet,
    build_utterances,
    format_report,
    fuse,
    parse_experiment_config,
    predict_ensemble,
    report,
    rescale_set,
    run_cv,
    stats_from_json,
    stats_to_json,
)
from .seqnet import dumps_params, history_csv, load_params

log = logging.getLogger("ccsq")

MODEL_SUFFIX = ".ccsq"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _matrix_csv(names, values):
    lines = [",".join(names)]
    lines += [",".join(repr(float(v)) for v in row) for row in values]
    return "\n".join(lines) + "\n"


def _write_sequence(seq, path, extra=None):
    meta = {"window_s": seq.window_s, "step_s": seq.step_s}
    meta.update(seq.meta)
    meta.update(extra or {})
    atomic_write(path, _matrix_csv(seq.feature_names, seq.vectors))
    atomic_write(Path(str(path) + ".json"), json.dumps(meta, sort_keys=True) + "\n")


def _write_lld(m, path):
    atomic_write(path, _matrix_csv(m.descriptor_names, m.values))
    atomic_write(
        Path(str(path) + ".json"),
        json.dumps({"kind": "lld", "frame_period_s": m.frame_period_s}, sort_keys=True) + "\n",
    )


def _read_list(path):
    base = Path(path).parent
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


# ----------------------------------------------------------------------------
# subcommands


def cmd_extract(args):
    if bool(args.wav) == bool(args.wav_list):
        raise UsageError("give exactly one of --wav or --wav-list")
    wavs = [Path(args.wav)] if args.wav else _read_list(args.wav_list)
    extra = Path(args.extra_lld) if args.extra_lld else None
    failures = []
    for wav in wavs:
        stem = wav.stem
        try:
            x, rate = feat.read_wav(wav)
            m = feat.extract_lld(x, rate)
            if extra is not None:
                src = extra / f"{stem}.csv" if extra.is_dir() else extra
                m = feat.concat_lld(m, feat.read_lld_csv(src))
            seq = feat.functional_sequence(m)
        except (ValidationError, OSError) as exc:
            failures.append((wav, str(exc)))
            log.error("%s: %s", wav, exc)
            continue
        if args.lld_out:
            _write_lld(m, Path(args.lld_out) / f"{stem}.csv")
        _write_sequence(seq, Path(args.functionals_out) / f"{stem}.csv")
        log.info("%s: %d frames, %d windows x %d features", wav, m.n_frames, seq.n_windows,
                 seq.vectors.shape[1])
    if failures:
        print(f"extract: {len(failures)} of {len(wavs)} file(s) failed", file=sys.stderr)
        for wav, msg in failures:
            print(f"  {wav}: {msg}", file=sys.stderr)
        return ValidationError.exit_code
    return 0


def cmd_pool(args):
    if bool(args.embeddings) == bool(args.embedding_list):
        raise UsageError("give exactly one of --embeddings or --embedding-list")
    files = [Path(args.embeddings)] if args.embeddings else _read_list(args.embedding_list)
    pooled = []
    for f in files:
        values, rate, names = feat.read_embedding_csv(f)
        pooled.append((f.stem, feat.pool_embeddings(values, rate, names=names)))
    for stem, seq in pooled:
        _write_sequence(seq, Path(args.out) / f"{stem}.csv")
    return 0


def _feature_files(directory):
    files = sorted(p for p in Path(directory).glob("*.csv"))
    if not files:
        raise ValidationError(f"no feature CSV files in {directory}")
    return files


def cmd_normalize(args):
    files = _feature_files(args.inp)
    seqs = {f.stem: feat.read_sequence_csv(f) for f in files}
    widths = {s.vectors.shape[1] for s in seqs.values()}
    if len(widths) != 1:
        raise ValidationError(f"inconsistent feature widths across files: {sorted(widths)}")
    table = PartitionFeatureTable.from_sequences(seqs, args.partition)
    mode = "cdf" if args.mode == "cdf" else "meanvar"
    if mode == "cdf" and (args.stats_in or args.stats_out):
        raise UsageError("--stats-in/--stats-out apply to --mode meanvar only")
    stats_in = NormStats.from_csv(args.stats_in) if args.stats_in else None
    out_table, stats = normalize_partition(table, mode, stats_in)
    parts = out_table.split()
    sidecar = {
        "normalization": "cdf_adjust" if mode == "cdf" else "meanvar",
        "partition": args.partition,
        "stats_source": "external" if stats_in is not None else "partition",
    }
    for stem, seq in seqs.items():
        ns = feat.FunctionalSequence(parts[stem], seq.feature_names, seq.window_s, seq.step_s,
                                     meta=dict(seq.meta))
        _write_sequence(ns, Path(args.out) / f"{stem}.csv", sidecar)
    if args.stats_out and stats is not None:
        atomic_write(args.stats_out, stats.dumps())
    if out_table.flags.get("degenerate"):
        log.warning("%d degenerate feature(s) set to zero", len(out_table.flags["degenerate"]))
    return 0


def cmd_folds(args):
    manifest = load_manifest(args.manifest)
    if args.strategy == "speaker":
        plan = make_speaker_folds(manifest, args.k, args.seed)
    else:
        plan = make_random_folds(manifest, args.k, args.seed)
    atomic_write(args.out, plan.dumps())
    log.info("fold sizes %s", plan.fold_sizes())
    return 0


def _load_features(manifest, directory, expect_mode=None):
    out = {}
    for r in manifest:
        path = Path(directory) / f"{r.utterance_id}.csv"
        if not path.exists():
            raise ValidationError(f"missing features for {r.utterance_id}: {path}")
        seq = feat.read_sequence_csv(path)
        mode = seq.meta.get("normalization")
        if expect_mode and mode and mode != expect_mode:
            raise ValidationError(
                f"{path}: features normalized with {mode}, config expects {expect_mode}"
            )
        out[r.utterance_id] = seq.vectors
    widths = {v.shape[1] for v in out.values()}
    if len(widths) != 1:
        raise ValidationError(f"inconsistent feature widths: {sorted(widths)}")
    return out, widths.pop()


def _read_config(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config error at $: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ValidationError("config error at $: expected a JSON object")
    return doc


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    doc = _read_config(args.config)
    features, width = _load_features(manifest, args.features, doc.get("normalization"))
    config = parse_experiment_config(doc, width, len(manifest.speakers), args.seed)
    if args.folds:
        plan = FoldPlan.loads(Path(args.folds).read_text(encoding="utf-8"))
        plan.check(manifest)
        config = replace(config, fold_plan=plan, k=plan.k)
    result = run_cv(manifest, features, config)
    out = Path(args.models_out)
    for mid, params in result.models.items():
        atomic_write(out / f"{mid}{MODEL_SUFFIX}", dumps_params(params))
        atomic_write(out / f"{mid}.history.csv", history_csv(result.histories[mid]))
    atomic_write(out / "oof.csv", result.oof.to_csv())
    atomic_write(out / "train_stats.json", stats_to_json(result.train_stats))
    atomic_write(out / "folds.csv", result.fold_plan.dumps())
    for mid, hist in result.histories.items():
        best = max(hist, key=lambda r: r.val_ccc)
        log.info("%s: %d epochs, best val CCC %.4f at epoch %d", mid, len(hist), best.val_ccc, best.epoch)
    return 0


def _load_models(directory):
    files = sorted(Path(directory).glob(f"*{MODEL_SUFFIX}"))
    if not files:
        raise ValidationError(f"no {MODEL_SUFFIX} model files in {directory}")
    return {f.stem: load_params(f) for f in files}


def cmd_predict(args):
    models = _load_models(args.models)
    manifest = load_manifest(args.manifest, partition=args.partition)
    features, _ = _load_features(manifest, args.features)
    spec = next(iter(models.values())).spec
    utts = build_utterances(manifest, features, spec.regression_tasks)
    preds = predict_ensemble(models, utts)
    if args.rescale:
        preds = rescale_set(preds, stats_from_json(Path(args.rescale).read_text(encoding="utf-8")))
    atomic_write(args.out, preds.to_csv())
    return 0


def _read_predictions(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return PredictionSet.from_csv(text, source=str(path))


def cmd_fuse(args):
    a = _read_predictions(args.a)
    b = _read_predictions(args.b)
    atomic_write(args.out, fuse(a, b, args.task).to_csv())
    return 0


def cmd_evaluate(args):
    preds = _read_predictions(args.predictions)
    gold = load_manifest(args.manifest, partition=args.partition)
    stats = stats_from_json(Path(args.train_stats).read_text(encoding="utf-8"))
    rows = report(preds, gold, stats, approach=args.approach)
    text = format_report(rows)
    doc = json.dumps({"rows": rows}, sort_keys=True, indent=1) + "\n"
    if args.out_json:
        atomic_write(args.out_json, doc)
    if args.out_txt:
        atomic_write(args.out_txt, text)
    sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="ccsq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("extract", help="audio -> LLD and functional CSVs")
    s.add_argument("--wav")
    s.add_argument("--wav-list")
    s.add_argument("--lld-out")
    s.add_argument("--functionals-out", required=True)
    s.add_argument("--extra-lld", help="LLD CSV (or directory of <stem>.csv) to append")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("pool", help="per-frame embeddings -> pooled 2 s / 1 s sequences")
    s.add_argument("--embeddings")
    s.add_argument("--embedding-list")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pool)

    s = sub.add_parser("normalize", help="partition-level feature normalization")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--mode", choices=("cdf", "meanvar"), required=True)
    s.add_argument("--partition", choices=("train", "dev", "test"), default="train")
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--stats-out")
    g.add_argument("--stats-in")
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("folds", help="build a fold plan")
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--strategy", choices=("random", "speaker"), default="random")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_folds)

    s = sub.add_parser("train", help="cross-validated training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--models-out", required=True)
    s.add_argument("--folds", help="fold plan file (default: built from the config)")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="ensemble prediction")
    s.add_argument("--models", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--partition", choices=("train", "dev", "test"), default="dev")
    s.add_argument("--rescale", help="train-stats JSON to rescale predictions to")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("fuse", help="average two prediction sets")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--task", choices=("arousal", "valence"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", help="CC / CCC / scaled CCC report")
    s.add_argument("--predictions", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--train-stats", required=True)
    s.add_argument("--partition", choices=("train", "dev", "test"), default="dev")
    s.add_argument("--approach", default="model")
    s.add_argument("--out-json")
    s.add_argument("--out-txt")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required")
        return args.func(args)
    except CcsqError as exc:
        print(f"ccsq: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"ccsq: error: invalid JSON: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    except OSError as exc:
        print(f"ccsq: error: {exc}", file=sys.stderr)
        return ValidationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
