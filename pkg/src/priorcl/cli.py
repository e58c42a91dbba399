"""Command-line entry point: ``priorcl <command> [--config FILE] [--set key=value ...]``.

Every command writes its artifacts into the run directory and prints a
one-line JSON summary on stdout.  Exit status: 0 ok, 1 invalid input or
configuration, 2 failed numerical check, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import edf, gradcheck
from .config import ConfigValidationError, RunConfig, dump_config, load_config
from .losses import gradient_curve
from .mining import TempSchedule, plan_batch
from .models import CheckpointError, load_checkpoint, save_checkpoint
from .prior_features import BAND_NAMES, dissimilarity_row, prior_features
from .signal_data import CacheFormatError, Dataset, load_dataset, save_dataset, split_by_subject, synth_dataset
from .training import (PRETRAIN_MODES, ConfigError, LeakageError, Metrics, NonFiniteGradientError,
                       finetune, knn_prior_baseline, linear_eval, pretrain, summarize, supervised, with_mode)

log = logging.getLogger("priorcl")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class NumericCheckFailed(RuntimeError):
    def __init__(self, message: str, summary: dict):
        super().__init__(message)
        self.summary = summary


# ---------------------------------------------------------------- data


def synthetic(data) -> Dataset:
    return synth_dataset(data.per_class, data.sample_rate_hz, data.subjects, data.seed, data.noise_scale,
                         data.amplitude_jitter)


def load_data(config: RunConfig) -> Dataset:
    data = config.data
    if data.source == "synthetic":
        return synthetic(data)
    if data.source == "cache":
        if not data.cache_path:
            raise ConfigValidationError(["data.cache_path is required when data.source = cache"])
        return load_dataset(data.cache_path)
    return load_edf_recordings(config)


def load_edf_recordings(config: RunConfig) -> Dataset:
    data = config.data
    problems = []
    if not data.edf_paths:
        problems.append("data.edf_paths is empty")
    if data.label_paths and len(data.label_paths) != len(data.edf_paths):
        problems.append("data.label_paths must match data.edf_paths one-to-one")
    if data.subject_ids and len(data.subject_ids) != len(data.edf_paths):
        problems.append("data.subject_ids must match data.edf_paths one-to-one")
    if problems:
        raise ConfigValidationError(problems)
    label_map = edf.parse_label_map(Path(data.label_map).read_text()) if data.label_map else edf.DEFAULT_LABEL_MAP
    epochs, subjects = [], {}
    for i, path in enumerate(data.edf_paths):
        subject = data.subject_ids[i] if data.subject_ids else i
        part = edf.extract_channel(edf.read_edf(path), data.channel, source_id=i, subject_id=subject)
        if data.label_paths:
            part = edf.attach_labels(part, edf.read_labels(data.label_paths[i], label_map))
            if data.trim_wake:
                part = edf.trim_wake(part)
        epochs.extend(part.epochs)
        subjects.update(part.subjects)
    return Dataset(epochs, subjects)


def split(config: RunConfig, dataset: Dataset) -> tuple[Dataset, Dataset]:
    return split_by_subject(dataset, config.train.train_fraction, config.seed)


# ---------------------------------------------------------------- writers


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_metrics(path: Path, metrics: Metrics, **extra) -> None:
    write_json(path, {**metrics.to_dict(), **extra})


def fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- commands


def cmd_gen_synth(config: RunConfig, args, out: Path) -> dict:
    ds = synthetic(config.data)
    save_dataset(ds, out / "dataset.pcl")
    return {"epochs": len(ds), "subjects": len(set(ds.subject_ids().tolist()))}


def cmd_ingest_edf(config: RunConfig, args, out: Path) -> dict:
    ds = load_edf_recordings(config)
    save_dataset(ds, out / "dataset.pcl")
    labels = ds.labels()
    return {"epochs": len(ds), "recordings": len(ds.recordings()), "labeled": int(np.sum(labels >= 0))}


def cmd_featurize(config: RunConfig, args, out: Path) -> dict:
    ds = load_data(config)
    feats = prior_features(ds.samples(), ds.sample_rate_hz, config.bands)
    labels = ds.labels()
    write_csv(out / "features.csv", ["epoch_index", "label"] + [f"e_{b}" for b in BAND_NAMES],
              ([i, int(labels[i])] + [fmt(v) for v in feats[i]] for i in range(len(ds))))
    return {"epochs": len(ds)}


def cmd_plan_dump(config: RunConfig, args, out: Path) -> dict:
    """Mining plans for the first batch of the dataset (two views per epoch)."""
    ds = load_data(config)
    b = min(config.train.batch_size, len(ds))
    feats = np.repeat(prior_features(ds.samples()[:b], ds.sample_rate_hz, config.bands), 2, axis=0)
    train = config.train
    schedule = train.schedule if train.mode == "priorcl" else TempSchedule(train.fixed_tau, train.fixed_tau)
    plans = plan_batch(feats, train.k, schedule)
    rows = []
    for plan in plans:
        d = dissimilarity_row(feats[plan.anchor], feats)
        for role, members in (("positive", plan.positives), ("negative", plan.negatives)):
            rows.extend([plan.anchor, j, role, fmt(d[j]), fmt(tau)] for j, tau in members)
    write_csv(out / "plans.csv", ["anchor", "member", "role", "dissimilarity", "temperature"], rows)
    return {"views": len(plans), "k": train.k}


def _pretrain_and_eval(config: RunConfig, mode: str, train: Dataset, test: Dataset, seed: int):
    source = train if mode == "unbiased" else train.unlabeled()
    result = pretrain(source, with_mode(config.train, mode), seed, config.augment, config.encoder, config.bands)
    return result, linear_eval(result.params, train, test, config.train, seed)


def cmd_pretrain(config: RunConfig, args, out: Path) -> dict:
    mode = config.train.mode
    if mode not in PRETRAIN_MODES:
        raise ConfigValidationError([f"train.mode {mode!r} is not a pretraining mode {PRETRAIN_MODES}"])
    train, test = split(config, load_data(config))
    result, metrics = _pretrain_and_eval(config, mode, train, test, config.seed)
    write_csv(out / "loss.csv", ["epoch", "loss"], ([i, fmt(v)] for i, v in enumerate(result.loss_history)))
    write_metrics(out / "metrics.json", metrics, mode=mode, seed=config.seed)
    save_checkpoint(result.params, out / "checkpoint.pclm")
    return {"mode": mode, "accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1,
            "final_loss": result.loss_history[-1] if result.loss_history else None}


def _checkpoint(config: RunConfig, args):
    if not args.checkpoint:
        raise ConfigValidationError(["--checkpoint is required"])
    return load_checkpoint(args.checkpoint, config.encoder)


def cmd_linear_eval(config: RunConfig, args, out: Path) -> dict:
    params = _checkpoint(config, args)
    train, test = split(config, load_data(config))
    metrics = linear_eval(params, train, test, config.train, config.seed)
    write_metrics(out / "metrics.json", metrics, seed=config.seed)
    return {"accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1}


def cmd_finetune(config: RunConfig, args, out: Path) -> dict:
    params = _checkpoint(config, args)
    train, test = split(config, load_data(config))
    metrics = finetune(params, train, test, args.recordings, config.train, config.seed)
    write_metrics(out / "metrics.json", metrics, seed=config.seed, recordings=args.recordings)
    return {"accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1, "recordings": args.recordings}


def cmd_supervised(config: RunConfig, args, out: Path) -> dict:
    train, test = split(config, load_data(config))
    metrics = supervised(train, test, args.recordings, config.train, config.seed, config.encoder)
    write_metrics(out / "metrics.json", metrics, seed=config.seed, recordings=args.recordings)
    return {"accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1, "recordings": args.recordings}


def cmd_knn_baseline(config: RunConfig, args, out: Path) -> dict:
    train, test = split(config, load_data(config))
    metrics = knn_prior_baseline(train, test, config.knn_neighbors, config.bands)
    write_metrics(out / "metrics.json", metrics, seed=config.seed, k_neighbors=config.knn_neighbors)
    return {"accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1}


def cmd_gradcheck(config: RunConfig, args, out: Path) -> dict:
    results = gradcheck.run_all()
    write_csv(out / "gradcheck.csv", ["check", "max_error", "rtol", "atol", "passed"],
              ([r.name, fmt(r.max_error), fmt(r.rtol), fmt(r.atol), int(r.passed)] for r in results))
    failed = [r.name for r in results if not r.passed]
    summary = {"checks": len(results), "failed": failed}
    if failed:
        raise NumericCheckFailed(f"gradient checks failed: {failed}", summary)
    return summary


CURVE_TAUS = (0.05, 0.07, 0.1, 1.0)


def cmd_gradient_curve(config: RunConfig, args, out: Path) -> dict:
    s_values = np.linspace(-1.0, 1.0, args.points)
    rows = []
    for target in ("positive", "negative"):
        for tau in CURVE_TAUS:
            for s, g in gradient_curve(target, tau, s_values):
                rows.append([target, fmt(tau), fmt(s), fmt(g)])
    write_csv(out / "gradient_curve.csv", ["target", "temperature", "similarity", "gradient"], rows)
    return {"rows": len(rows)}


ABLATION_METHODS = ("basic", "feature_knn", "basic_feature", "priorcl")


def cmd_ablation(config: RunConfig, args, out: Path) -> dict:
    data = load_data(config)
    per_seed = []
    for seed in config.train.seeds:
        seeded = replace(config, seed=seed)
        train, test = split(seeded, data)
        for method in ABLATION_METHODS:
            if method == "feature_knn":
                m = knn_prior_baseline(train, test, config.knn_neighbors, config.bands)
            else:
                m = _pretrain_and_eval(seeded, method, train, test, seed)[1]
            per_seed.append((method, seed, m.accuracy, m.macro_f1))
    write_csv(out / "ablation_seeds.csv", ["method", "seed", "accuracy", "macro_f1"],
              ([m, s, fmt(a), fmt(f)] for m, s, a, f in per_seed))
    rows, summary = [], {}
    for method in ABLATION_METHODS:
        acc = summarize([a for m, _, a, _ in per_seed if m == method])
        f1 = summarize([f for m, _, _, f in per_seed if m == method])
        rows.append([method, fmt(acc[0]), fmt(f1[0]), fmt(acc[1]), fmt(f1[1])])
        summary[method] = acc[0]
    write_csv(out / "ablation.csv", ["method", "accuracy", "macro_f1", "accuracy_std", "macro_f1_std"], rows)
    return {"seeds": list(config.train.seeds), "accuracy": summary}


def sweep_grid(config: RunConfig) -> list[tuple[float, float, float]]:
    """``(ratio, tau_min, tau_max)`` cells with ``tau_min <= tau_max`` (the diagonal is fixed temperature)."""
    taus = sorted(config.sweep_taus)
    return [(r, lo, hi) for r in config.sweep_ratios for i, lo in enumerate(taus) for hi in taus[i:]]


def cmd_sweep(config: RunConfig, args, out: Path) -> dict:
    train, test = split(config, load_data(config))
    rows = []
    for ratio, lo, hi in sweep_grid(config):
        cell = replace(config, train=replace(config.train, k_ratio=ratio, schedule=TempSchedule(lo, hi)))
        m = _pretrain_and_eval(cell, "priorcl", train, test, config.seed)[1]
        rows.append([fmt(ratio), cell.train.k, fmt(lo), fmt(hi), fmt(m.accuracy), fmt(m.macro_f1)])
    write_csv(out / "sweep.csv", ["ratio", "k", "tau_min", "tau_max", "accuracy", "macro_f1"], rows)
    return {"cells": len(rows)}


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "ingest-edf": cmd_ingest_edf,
    "featurize": cmd_featurize,
    "plan-dump": cmd_plan_dump,
    "pretrain": cmd_pretrain,
    "linear-eval": cmd_linear_eval,
    "finetune": cmd_finetune,
    "supervised": cmd_supervised,
    "knn-baseline": cmd_knn_baseline,
    "gradcheck": cmd_gradcheck,
    "gradient-curve": cmd_gradient_curve,
    "ablation": cmd_ablation,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- driver


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priorcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("--out", help="run directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("linear-eval", "finetune"):
            p.add_argument("--checkpoint", help="encoder checkpoint written by pretrain")
        if name in ("finetune", "supervised"):
            p.add_argument("--recordings", type=int, default=None, help="labeled training recordings (default all)")
        if name == "gradient-curve":
            p.add_argument("--points", type=int, default=201)
    return parser


def _stage(out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _publish(staging: Path, out: Path) -> None:
    if not out.exists():
        staging.rename(out)
        return
    for item in staging.iterdir():
        item.replace(out / item.name)
    staging.rmdir()


def run(argv: list[str] | None = None) -> tuple[int, dict]:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    summary: dict = {"command": args.command}
    staging = None
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out:
            overrides.append(f"output_dir={json.dumps(args.out)}")
        config = load_config(args.config, overrides)
        out = Path(config.output_dir)
        staging = _stage(out)
        (staging / "config.txt").write_text(dump_config(config))
        summary.update(COMMANDS[args.command](config, args, staging))
        _publish(staging, out)
        staging = None
        summary.update(status="ok", output_dir=str(out))
        return EXIT_OK, summary
    except NumericCheckFailed as exc:
        summary.update(exc.summary)
        code, message = EXIT_NUMERIC, str(exc)
    except NonFiniteGradientError as exc:
        code, message = EXIT_NUMERIC, str(exc)
    except ConfigValidationError as exc:
        code, message = EXIT_INVALID, str(exc)
        summary["problems"] = exc.problems
    except (edf.EdfError, CacheFormatError, CheckpointError, OSError) as exc:
        code, message = EXIT_IO, f"{type(exc).__name__}: {exc}"
    except (ConfigError, LeakageError, edf.UnknownChannelError, ValueError) as exc:
        code, message = EXIT_INVALID, f"{type(exc).__name__}: {exc}"
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)
    log.error(message)
    summary.update(status="error", exit_code=code, error=message)
    return code, summary


def main(argv: list[str] | None = None) -> int:
    code, summary = run(argv)
    print(json.dumps(summary, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
