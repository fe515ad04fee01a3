"""Command line entry point: ``dpfb {eps,calibrate,train,predict,evaluate,audit,experiment}``.

Exit codes: 0 success, 1 a run failed (training divergence, incomplete grid),
2 bad parameters or input files, 3 noise calibration failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import tomli

from dpfb import __version__, accountant, harness, metrics, stats, trainer
from dpfb.data import CohortSpec, read_cohort, read_predictions, write_predictions, write_report
from dpfb.errors import CalibrationError, DpfbError, ParameterError, SchemaError

EXIT_OK, EXIT_RUN, EXIT_PARAM, EXIT_CALIBRATION = 0, 1, 2, 3

TRAIN_KEYS = {f.name for f in fields(trainer.TrainConfig)}
COHORT_KEYS = {"n_patients", "images_per_patient", "feature_dim", "label_count", "sex_mix",
               "age_mix", "age_noise", "signal_strength"}
GRID_KEYS = {"strategies", "epsilons", "fractions", "seeds", "test_fraction", "pretrain_steps",
             "source_shift", "fraction_epsilon", "attributes", "fairness"}
BOOT_KEYS = {"n_resamples", "bootstrap_level"}
PATH_KEYS = {"cohort_path", "source_matched_path", "source_shifted_path"}
# per-cell values the harness sets itself
EXPERIMENT_TRAIN_KEYS = TRAIN_KEYS - {"noise_multiplier", "seed"}


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise ParameterError(f"{path}: {exc}") from None


def _check_keys(doc: dict, allowed: set, path) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ParameterError(f"{path}: unknown keys {unknown}")


def _relative(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base.parent / p


def _train_config(doc: dict) -> dict:
    out = {k: doc[k] for k in TRAIN_KEYS if k in doc}
    for k in ("nominal_batch", "max_steps", "seed", "hidden_dim"):
        if k in out and not isinstance(out[k], int):
            raise ParameterError(f"{k} must be an integer")
    return out


# ---------------------------------------------------------------- commands

def cmd_eps(args) -> int:
    spend = accountant.epsilon_for(accountant.PrivacyParams(args.sigma, args.q, args.steps, args.delta))
    _print_json({"epsilon": spend.epsilon, "optimal_order": spend.optimal_order,
                 "delta": spend.delta, "at_grid_edge": spend.at_grid_edge})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    sigma = accountant.calibrate_sigma(args.target_eps, args.q, args.steps, args.delta)
    spend = accountant.epsilon_for(accountant.PrivacyParams(sigma, args.q, args.steps, args.delta))
    _print_json({"sigma": sigma, "epsilon": spend.epsilon, "optimal_order": spend.optimal_order})
    return EXIT_OK


def cmd_train(args) -> int:
    path = Path(args.config)
    doc = _load_toml(path)
    _check_keys(doc, TRAIN_KEYS | {"cohort", "init", "pretrain_steps", "target_epsilon"}, path)
    if "cohort" not in doc:
        raise ParameterError(f"{path}: 'cohort' (path to a cohort CSV) is required")
    cohort = read_cohort(_relative(path, doc["cohort"]))
    if cohort.split is not None:
        cohort = cohort.select("train")
    try:
        config = trainer.TrainConfig(**_train_config(doc))
    except TypeError as exc:
        raise ParameterError(f"{path}: {exc}") from None
    if "target_epsilon" in doc:
        if "noise_multiplier" in doc:
            raise ParameterError("give either noise_multiplier or target_epsilon, not both")
        q = config.nominal_batch / len(cohort)
        config = replace(config, noise_multiplier=accountant.calibrate_sigma(
            float(doc["target_epsilon"]), q, config.max_steps, config.delta))

    init = doc.get("init", "cold")
    if init == "cold":
        model0 = trainer.cold_start(cohort.feature_dim, config.hidden_dim, cohort.label_count,
                                    config.seed)
    elif init.startswith("warm:"):
        src = _relative(path, init[len("warm:"):])
        if src.suffix == ".json":
            model0 = trainer.load_model(src)
        else:
            model0 = trainer.warm_start(read_cohort(src), config, doc.get("pretrain_steps"))
    else:
        raise ParameterError(f"init must be 'cold' or 'warm:PATH', got {init!r}")

    model, trace = trainer.train(cohort, config, model0)
    trainer.save_model(model, args.out, trace, config)
    _print_json({"out": str(args.out), "epsilon": trace.epsilon,
                 "sigma": config.noise_multiplier, "steps": config.max_steps})
    return EXIT_OK


def cmd_predict(args) -> int:
    model = trainer.load_model(args.model)
    cohort = read_cohort(args.cohort)
    if args.split:
        if cohort.split is None:
            raise ParameterError(f"{args.cohort} has no split column")
        cohort = cohort.select(args.split)
    write_predictions(trainer.predict(model, cohort), args.out)
    return EXIT_OK


def _with_intervals(table, names, n_resamples, seed) -> dict:
    if n_resamples == 0:
        return {}
    cfg = stats.BootstrapConfig(n_resamples, seed=seed)
    attrs = sorted({n.split(":")[0] for n in names if ":" in n})
    est = harness.cell_metrics(table, attrs, fairness=bool(attrs))
    rows = stats.resample_indices(table.patient_id, cfg)
    values = [harness.cell_metrics(table.take(r), attrs, fairness=bool(attrs)) for r in rows]
    out = {}
    for name in names:
        res = harness.summary_dict([v[name] for v in values], est[name], cfg.level)
        out[name] = {**res, "seed": seed}
    return out


def cmd_evaluate(args) -> int:
    table = read_predictions(args.predictions)
    doc = metrics.evaluate(table).to_dict()
    doc["bootstrap"] = _with_intervals(table, harness.UTILITY_METRICS, args.n_resamples, args.seed)
    write_report(doc, args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    table = read_predictions(args.predictions)
    attrs = tuple(a.strip() for a in args.attributes.split(",") if a.strip())
    unknown = set(attrs) - set(metrics.ATTRIBUTE_VOCAB)
    if not attrs or unknown:
        raise ParameterError(f"attributes must be drawn from {sorted(metrics.ATTRIBUTE_VOCAB)}")
    doc = metrics.audit(table, attrs).to_dict()
    names = [f"{a}:{m}" for a in attrs for m in harness.FAIRNESS_METRICS]
    doc["bootstrap"] = _with_intervals(table, names, args.n_resamples, args.seed)
    write_report(doc, args.out)
    return EXIT_OK


def _seed_override(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ParameterError(f"DPFB_SEED must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ParameterError("DPFB_SEED is empty")
    return seeds


def experiment_config(path) -> harness.ExperimentConfig:
    """Build an ExperimentConfig from the flat TOML schema (see README)."""
    try:
        return _experiment_config(Path(path))
    except TypeError as exc:  # wrong value types in the config file
        raise ParameterError(f"{path}: {exc}") from None


def _experiment_config(path: Path) -> harness.ExperimentConfig:
    doc = _load_toml(path)
    _check_keys(doc, COHORT_KEYS | GRID_KEYS | BOOT_KEYS | PATH_KEYS | EXPERIMENT_TRAIN_KEYS, path)
    kw = {}
    cohort_kw = {k: (tuple(doc[k]) if isinstance(doc[k], list) else doc[k])
                 for k in COHORT_KEYS if k in doc}
    kw["cohort"] = CohortSpec(**cohort_kw)
    for k in GRID_KEYS & doc.keys():
        v = doc[k]
        kw[k] = tuple(float(x) for x in v) if k in ("epsilons", "fractions") else (
            tuple(v) if isinstance(v, list) else v)
    train = {k: doc[k] for k in EXPERIMENT_TRAIN_KEYS if k in doc}
    kw["train"] = replace(harness._default_train(), **_train_config(train))
    kw["bootstrap"] = stats.BootstrapConfig(doc.get("n_resamples", 1000),
                                            doc.get("bootstrap_level", 0.95))
    if "cohort_path" in doc:
        kw["cohort_override"] = read_cohort(_relative(path, doc["cohort_path"]))
        sources = {}
        for key, strategy in (("source_matched_path", "warm_matched"),
                              ("source_shifted_path", "warm_shifted")):
            if key in doc:
                sources[strategy] = read_cohort(_relative(path, doc[key]))
        kw["sources_override"] = sources
    env = os.environ.get("DPFB_SEED")
    if env is not None:
        kw["seeds"] = _seed_override(env)
    return harness.ExperimentConfig(**kw)


def cmd_experiment(args) -> int:
    config = experiment_config(args.config)
    report = harness.run_experiment(config, jobs=args.jobs)
    Path(args.out).write_text(harness.render_report(report, "json"), encoding="utf-8")
    if args.markdown:
        Path(args.markdown).write_text(harness.render_report(report, "markdown"), encoding="utf-8")
    failed = sum(c["status"] != "ok" for c in report.cells)
    verdicts = {k: v["verdict"] for k, v in report.trends.items()}
    _print_json({"out": str(args.out), "cells": len(report.cells), "failed": failed,
                 "trends": verdicts})
    return EXIT_OK if report.complete else EXIT_RUN


# ---------------------------------------------------------------- parser

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpfb", description="DP-SGD training and fairness audits")
    p.add_argument("--version", action="version", version=f"dpfb {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eps", help="epsilon spent by a Poisson-subsampled Gaussian mechanism")
    e.add_argument("--sigma", type=float, required=True)
    e.add_argument("--q", type=float, required=True)
    e.add_argument("--steps", type=int, required=True)
    e.add_argument("--delta", type=float, default=accountant.DEFAULT_DELTA)
    e.set_defaults(func=cmd_eps)

    c = sub.add_parser("calibrate", help="smallest noise multiplier meeting an epsilon target")
    c.add_argument("--target-eps", type=float, required=True)
    c.add_argument("--q", type=float, required=True)
    c.add_argument("--steps", type=int, required=True)
    c.add_argument("--delta", type=float, default=accountant.DEFAULT_DELTA)
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("train", help="DP-SGD training from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="score a cohort CSV with a saved model")
    pr.add_argument("--model", required=True)
    pr.add_argument("--cohort", required=True)
    pr.add_argument("--split", choices=("train", "test"))
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    for name, func, help_ in (("evaluate", cmd_evaluate, "utility metrics of a prediction CSV"),
                              ("audit", cmd_audit, "subgroup fairness metrics of a prediction CSV")):
        a = sub.add_parser(name, help=help_)
        a.add_argument("--predictions", required=True)
        a.add_argument("--out", required=True)
        if name == "audit":
            a.add_argument("--attributes", default="sex,age_group")
        a.add_argument("--n-resamples", type=int, default=1000,
                       help="patient-level bootstrap resamples for CIs (0 disables)")
        a.add_argument("--seed", type=int, default=0)
        a.set_defaults(func=func)

    x = sub.add_parser("experiment", help="run an experiment grid")
    x.add_argument("--config", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--markdown")
    x.add_argument("--jobs", type=_positive_int, default=1)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        n_resamples = getattr(args, "n_resamples", 0)
        if n_resamples < 0 or n_resamples == 1:
            raise ParameterError("--n-resamples must be 0 or at least 2")
        return args.func(args)
    except CalibrationError as exc:
        print(f"dpfb: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (ParameterError, SchemaError) as exc:
        print(f"dpfb: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except FileNotFoundError as exc:
        print(f"dpfb: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_PARAM
    except DpfbError as exc:
        print(f"dpfb: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
