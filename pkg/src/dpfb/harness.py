"""Experiment grid: initialization strategy x privacy target x data fraction x seed.

One replicate seed owns everything random in its slice of the grid: the task
weights, the target and source cohorts, the patient split, the cold init,
the training noise and the bootstrap resamples. Each stream gets its own
64-bit seed derived with ``numpy.random.SeedSequence([seed, stream])``, so
adding a strategy or an epsilon target never perturbs the others. All cells
of a replicate share the test split, the bootstrap indices and the DP-SGD
sampling stream (common random numbers), which is what makes the paired
tests and the seed-mean trend comparisons sharp.

Seed-level summaries bootstrap the seed-averaged metric: resample ``r``
averages resample ``r`` of every seed's test set. Paired tests between two
grid rows use the same construction, so each comparison yields one p-value
rather than one per seed.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from typing import Sequence

import numpy as np

from dpfb import accountant, metrics, stats, trainer
from dpfb.accountant import EpsilonRange
from dpfb.data import Cohort, CohortSpec, dumps_report, generate, patient_split, subsample_fraction
from dpfb.errors import DpfbError, ParameterError
from dpfb.stats import BootstrapConfig

STRATEGIES = ("cold", "warm_shifted", "warm_matched")
UTILITY_METRICS = ("auroc", "accuracy", "sensitivity", "specificity")
FAIRNESS_METRICS = ("auroc_disparity", "eod", "od")
FAMILY_RULE = "one family per (metric, data fraction); all strategy and epsilon comparisons pooled"

# stream ids for derived seeds
_TASK, _COHORT, _SPLIT, _SRC_MATCHED, _SRC_SHIFTED, _INIT, _TRAIN, _FRACTION, _BOOT = range(9)


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def _default_train() -> trainer.TrainConfig:
    # C = 3 rather than the trainer default of 1: less clipping bias for warm starts
    return trainer.TrainConfig(learning_rate=1e-3, clip_norm=3.0, max_steps=500)


@dataclass(frozen=True)
class ExperimentConfig:
    """Grid definition. ``cohort`` gives the synthetic task's shape; its
    ``task_seed`` and ``seed`` are ignored because each replicate derives its
    own. ``cohort_override`` (a loaded cohort) replaces generation entirely,
    with warm-start sources taken from ``sources_override``.
    """

    cohort: CohortSpec = field(default_factory=CohortSpec)
    strategies: tuple[str, ...] = STRATEGIES
    epsilons: tuple[float, ...] = (0.5, 2.0, 8.0, math.inf)
    fractions: tuple[float, ...] = (1.0,)
    seeds: tuple[int, ...] = tuple(range(10))
    train: trainer.TrainConfig = field(default_factory=_default_train)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    test_fraction: float = 0.2
    pretrain_steps: int = 500
    source_shift: float = 0.3
    fraction_epsilon: float = 2.0    # epsilon at which fraction_scaling is judged
    attributes: tuple[str, ...] = ("sex", "age_group")
    fairness: bool = True
    cohort_override: Cohort | None = field(default=None, compare=False, repr=False)
    sources_override: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (self.strategies and self.epsilons and self.seeds and self.fractions):
            raise ParameterError("strategies, epsilons, fractions and seeds must be non-empty")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ParameterError(f"unknown strategies {sorted(unknown)}; choose from {STRATEGIES}")
        if len(set(self.strategies)) != len(self.strategies) or len(set(self.seeds)) != len(self.seeds):
            raise ParameterError("strategies and seeds must not repeat")
        if not all(0 < f <= 1 for f in self.fractions) or len(set(self.fractions)) != len(self.fractions):
            raise ParameterError("fractions must be distinct values in (0, 1]")
        ranges = [target_range(e) for e in self.epsilons]
        if len(set(ranges)) != len(ranges):
            raise ParameterError(f"epsilon targets {self.epsilons} do not map to distinct ranges")
        unknown = set(self.attributes) - set(metrics.ATTRIBUTE_VOCAB)
        if unknown:
            raise ParameterError(f"unknown attributes {sorted(unknown)}")
        if self.pretrain_steps < 0 or not 0 <= self.source_shift <= 1:
            raise ParameterError("pretrain_steps must be >= 0 and source_shift in [0, 1]")

    @property
    def sorted_epsilons(self) -> list[float]:
        return sorted(self.epsilons)

    def describe(self) -> dict:
        cohort = ({"path_supplied": True} if self.cohort_override is not None
                  else _spec_dict(self.cohort))
        return {"cohort": cohort, "strategies": list(self.strategies),
                "epsilons": list(self.epsilons), "fractions": list(self.fractions),
                "seeds": list(self.seeds), "train": asdict(self.train),
                "bootstrap": asdict(self.bootstrap), "test_fraction": self.test_fraction,
                "pretrain_steps": self.pretrain_steps, "source_shift": self.source_shift,
                "fraction_epsilon": self.fraction_epsilon, "attributes": list(self.attributes),
                "fairness": self.fairness, "generator": stats.GENERATOR}


def _spec_dict(spec: CohortSpec) -> dict:
    d = asdict(spec)
    # replaced per replicate by derived seeds
    del d["task_seed"], d["seed"]
    if d["prevalence"] is not None:
        d["prevalence"] = {f"{s}|{a}": v for (s, a), v in d["prevalence"].items()}
    return d


def target_range(eps: float) -> EpsilonRange:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", accountant.BoundaryWarning)
        return accountant.classify_epsilon_range(eps)


# ---------------------------------------------------------------- one replicate

@dataclass
class CellResult:
    strategy: str
    epsilon_target: float
    fraction: float
    seed: int
    status: str = "ok"
    error: str | None = None
    sigma: float | None = None
    achieved_epsilon: float | None = None
    optimal_order: int | None = None
    n_train_patients: int = 0
    n_train_rows: int = 0
    estimates: dict[str, float] = field(default_factory=dict)
    metric_report: dict | None = None
    fairness_report: dict | None = None
    resamples: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def key(self) -> tuple:
        return (self.strategy, self.epsilon_target, self.fraction)

    def to_dict(self, level: float) -> dict:
        out = {"strategy": self.strategy, "epsilon_target": self.epsilon_target,
               "fraction": self.fraction, "seed": self.seed, "status": self.status}
        if self.status != "ok":
            out["error"] = self.error
            return out
        achieved = target_range(self.achieved_epsilon)
        expected = target_range(self.epsilon_target)
        out.update({
            "sigma": self.sigma, "achieved_epsilon": self.achieved_epsilon,
            "optimal_order": self.optimal_order,
            "target_range": expected.value, "epsilon_range": achieved.value,
            "range_miss": achieved is not expected,
            "n_train_patients": self.n_train_patients, "n_train_rows": self.n_train_rows,
            "metrics": {name: summary_dict(self.resamples[name], est, level)
                        for name, est in self.estimates.items()},
            "metric_report": self.metric_report})
        if self.fairness_report is not None:
            out["fairness_report"] = self.fairness_report
        return out


def summary_dict(values: np.ndarray, estimate: float, level: float) -> dict:
    try:
        r = stats.summarize(values, estimate, level)
    except DpfbError as exc:
        return {"estimate": estimate, "error": str(exc)}
    return {"estimate": r.estimate, "mean": r.mean, "sd": r.sd, "ci95": [r.ci_low, r.ci_high],
            "n_resamples": r.n_resamples, "n_undefined": r.n_undefined}


def cell_metrics(table: metrics.PredictionTable, attributes: Sequence[str],
                 fairness: bool = True) -> dict[str, float]:
    """Scalar utility and disparity metrics of one prediction table.

    Utility metrics use per-label Youden thresholds of ``table`` itself;
    disparities apply those whole-table thresholds to every subgroup.
    Undefined values come back as NaN.
    """
    out = dict.fromkeys(metric_names(attributes, fairness), math.nan)
    try:
        rep = metrics.evaluate(table)
    except DpfbError:
        return out
    out.update(auroc=rep.mean_auroc, accuracy=rep.mean_accuracy,
               sensitivity=rep.mean_sensitivity, specificity=rep.mean_specificity)
    if fairness:
        for attr in attributes:
            try:
                f = metrics.audit(table, (attr,), rep.thresholds).attributes[attr]
            except DpfbError:
                continue
            for name in FAIRNESS_METRICS:
                out[f"{attr}:{name}"] = getattr(f, name)
    return out


def metric_names(attributes: Sequence[str], fairness: bool = True) -> list[str]:
    names = list(UTILITY_METRICS)
    if fairness:
        names += [f"{a}:{m}" for a in attributes for m in FAIRNESS_METRICS]
    return names


def replicate_seeds(seed: int) -> dict[str, int]:
    return {name: derive_seed(seed, stream) for name, stream in (
        ("task", _TASK), ("cohort", _COHORT), ("split", _SPLIT),
        ("source_matched", _SRC_MATCHED), ("source_shifted", _SRC_SHIFTED),
        ("init", _INIT), ("train", _TRAIN), ("fraction", _FRACTION), ("bootstrap", _BOOT))}


def replicate_data(config: ExperimentConfig, seed: int) -> tuple[Cohort, Cohort, dict]:
    """(train, test, sources) for one replicate seed."""
    s = replicate_seeds(seed)
    if config.cohort_override is not None:
        cohort = config.cohort_override
        if cohort.split is None:
            cohort = patient_split(cohort, config.test_fraction, s["split"])
        return cohort.select("train"), cohort.select("test"), dict(config.sources_override or {})
    spec = replace(config.cohort, task_seed=s["task"], seed=s["cohort"])
    cohort = patient_split(generate(spec), config.test_fraction, s["split"])
    sources = {}
    if "warm_matched" in config.strategies:
        sources["warm_matched"] = generate(replace(spec, seed=s["source_matched"], id_prefix="S"))
    if "warm_shifted" in config.strategies:
        sources["warm_shifted"] = generate(replace(spec, seed=s["source_shifted"], id_prefix="T",
                                                   distribution_shift=config.source_shift))
    return cohort.select("train"), cohort.select("test"), sources


def initial_models(config: ExperimentConfig, seed: int, train: Cohort,
                   sources: dict) -> dict[str, trainer.Model]:
    init_seed = replicate_seeds(seed)["init"]
    tc = config.train
    out = {}
    for strategy in config.strategies:
        if strategy == "cold":
            out[strategy] = trainer.cold_start(train.feature_dim, tc.hidden_dim,
                                               train.label_count, init_seed)
        else:
            if strategy not in sources:
                raise ParameterError(f"strategy {strategy} needs a source cohort")
            out[strategy] = trainer.warm_start(sources[strategy], tc, config.pretrain_steps,
                                               init_seed)
    return out


def cell_train_config(config: ExperimentConfig, seed: int, eps: float, q: float,
                      steps: int) -> trainer.TrainConfig:
    """Per-cell training config; epsilon = inf is the non-private baseline (no noise, no clipping)."""
    base = replace(config.train, seed=replicate_seeds(seed)["train"], max_steps=steps)
    if math.isinf(eps):
        return replace(base, noise_multiplier=0.0, clip_norm=math.inf)
    sigma = accountant.calibrate_sigma(eps, q, steps, config.train.delta)
    return replace(base, noise_multiplier=sigma)


def run_replicate(config: ExperimentConfig, seed: int) -> list[CellResult]:
    """Every cell of one seed, in grid order (fraction, epsilon, strategy)."""
    s = replicate_seeds(seed)
    cells = [CellResult(st, e, f, seed) for f in config.fractions
             for e in config.epsilons for st in config.strategies]
    try:
        full_train, test, sources = replicate_data(config, seed)
        inits = initial_models(config, seed, full_train, sources)
        indices = stats.resample_indices(test.patient_id,
                                         replace(config.bootstrap, seed=s["bootstrap"]))
    except DpfbError as exc:
        for c in cells:
            c.status, c.error = "failed", f"replicate setup: {exc}"
        return cells

    subsets: dict[float, Cohort] = {}
    train_cfgs: dict[tuple, trainer.TrainConfig] = {}
    for cell in cells:
        try:
            if cell.fraction not in subsets:
                subsets[cell.fraction] = subsample_fraction(full_train, cell.fraction, s["fraction"])
            train = subsets[cell.fraction]
            cfg_key = (cell.fraction, cell.epsilon_target)
            if cfg_key not in train_cfgs:
                q = config.train.nominal_batch / len(train)
                train_cfgs[cfg_key] = cell_train_config(config, seed, cell.epsilon_target, q,
                                                        config.train.max_steps)
            _run_cell(cell, config, train, test, inits[cell.strategy], train_cfgs[cfg_key], indices)
        except (DpfbError, AssertionError) as exc:
            cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
    return cells


def _run_cell(cell, config, train, test, init, cfg, indices) -> None:
    model, trace = trainer.train(train, cfg, init)
    table = trainer.predict(model, test)
    cell.sigma = cfg.noise_multiplier
    cell.achieved_epsilon = trace.epsilon
    cell.optimal_order = None if trace.spend is None else trace.spend.optimal_order
    cell.n_train_patients = len(train.patients())
    cell.n_train_rows = len(train)
    rep = metrics.evaluate(table)
    cell.metric_report = rep.to_dict()
    if config.fairness:
        cell.fairness_report = metrics.audit(table, config.attributes, rep.thresholds).to_dict()
    cell.estimates = cell_metrics(table, config.attributes, config.fairness)
    names = list(cell.estimates)
    values = np.array([[v for v in cell_metrics(table.take(rows), config.attributes,
                                                config.fairness).values()]
                       for rows in indices])
    cell.resamples = {name: values[:, j] for j, name in enumerate(names)}


def _replicate_job(args):
    config, seed = args
    return run_replicate(config, seed)


# ---------------------------------------------------------------- assembly

@dataclass
class ExperimentReport:
    config: dict
    cells: list[dict]
    summary: list[dict]
    comparisons: list[dict]
    trends: dict
    complete: bool

    def to_dict(self) -> dict:
        return {"config": self.config, "families": FAMILY_RULE, "complete": self.complete,
                "cells": self.cells, "summary": self.summary,
                "comparisons": self.comparisons, "trends": self.trends}


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Run the whole grid; replicate seeds may run in parallel with ``jobs > 1``.

    Results are assembled in seed order whatever the completion order, so
    the report does not depend on ``jobs``.
    """
    work = [(config, seed) for seed in config.seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_replicate_job, work))
    else:
        per_seed = [_replicate_job(w) for w in work]
    cells = [c for rep in per_seed for c in rep]
    return assemble(config, cells)


def assemble(config: ExperimentConfig, cells: list[CellResult]) -> ExperimentReport:
    level = config.bootstrap.level
    rows = _aggregate(config, cells)
    comparisons = _comparisons(config, rows)
    return ExperimentReport(
        config=config.describe(),
        cells=[c.to_dict(level) for c in cells],
        summary=[_row_dict(r, level) for r in rows.values()],
        comparisons=comparisons,
        trends=trend_verdicts(config, {k: r["estimates"].get("auroc", math.nan)
                                       for k, r in rows.items()}),
        complete=all(c.status == "ok" for c in cells))


def _aggregate(config, cells) -> dict[tuple, dict]:
    """Seed-averaged estimates and resample vectors for each (strategy, eps, fraction)."""
    rows = {}
    for f in config.fractions:
        for e in config.epsilons:
            for st in config.strategies:
                mine = [c for c in cells if c.key == (st, e, f)]
                ok = [c for c in mine if c.status == "ok"]
                row = {"key": (st, e, f), "n_seeds": len(ok), "n_failed": len(mine) - len(ok),
                       "estimates": {}, "resamples": {}, "achieved": []}
                if ok:
                    for name in ok[0].estimates:
                        row["estimates"][name] = float(np.mean([c.estimates[name] for c in ok]))
                        row["resamples"][name] = np.mean([c.resamples[name] for c in ok], axis=0)
                    row["achieved"] = [c.achieved_epsilon for c in ok]
                    row["range_miss"] = sum(target_range(c.achieved_epsilon) is not target_range(e)
                                            for c in ok)
                rows[(st, e, f)] = row
    return rows


def _row_dict(row, level) -> dict:
    st, e, f = row["key"]
    out = {"strategy": st, "epsilon_target": e, "fraction": f, "n_seeds": row["n_seeds"],
           "n_failed": row["n_failed"], "target_range": target_range(e).value}
    if row["n_seeds"]:
        out["achieved_epsilon_mean"] = float(np.mean(row["achieved"]))
        out["range_miss_cells"] = row["range_miss"]
        out["metrics"] = {name: summary_dict(row["resamples"][name], est, level)
                          for name, est in row["estimates"].items()}
    return out


def _comparisons(config, rows) -> list[dict]:
    tests = []
    for f in config.fractions:
        for e in config.epsilons:
            if math.isinf(e):
                continue
            for st in config.strategies:
                if (st, math.inf, f) in rows:
                    tests.append(("vs_non_private", f, e, (st, e, f), (st, math.inf, f)))
        for e in config.epsilons:
            for a, b in combinations(config.strategies, 2):
                tests.append(("between_strategies", f, e, (b, e, f), (a, e, f)))

    out = []
    names = metric_names(config.attributes, config.fairness)
    for metric in names:
        for f in config.fractions:
            family = [t for t in tests if t[1] == f]
            results = []
            for kind, _, e, ka, kb in family:
                ra, rb = rows[ka], rows[kb]
                entry = {"metric": metric, "family": f"{metric}|fraction={f:g}", "kind": kind,
                         "fraction": f, "epsilon_target": e,
                         "a": {"strategy": ka[0], "epsilon_target": ka[1]},
                         "b": {"strategy": kb[0], "epsilon_target": kb[1]}}
                try:
                    if not (ra["n_seeds"] and rb["n_seeds"]):
                        raise ParameterError("a compared row has no completed cells")
                    res = stats.paired_from_values(ra["resamples"][metric], rb["resamples"][metric])
                except DpfbError as exc:
                    entry["error"] = str(exc)
                    res = None
                results.append((entry, res))
            valid = [r for _, r in results if r is not None]
            adjusted = iter(stats.bh_fdr([r.p_value for r in valid]) if valid else [])
            for entry, res in results:
                if res is not None:
                    entry.update(res.to_dict(float(next(adjusted))))
                out.append(entry)
    return out


# ---------------------------------------------------------------- trend verdicts

def _verdict(ok) -> str:
    return "pass" if ok else "fail"


def trend_verdicts(config: ExperimentConfig, auc: dict[tuple, float]) -> dict:
    """Judge the three qualitative trends on seed-mean AUROC."""
    out = {}
    f_top = max(config.fractions)
    eps = config.sorted_epsilons

    pairs = []
    for st in config.strategies:
        for lo, hi in zip(eps, eps[1:]):
            a, b = auc[(st, lo, f_top)], auc[(st, hi, f_top)]
            pairs.append({"strategy": st, "from": lo, "to": hi, "auroc_from": a, "auroc_to": b,
                          "non_decreasing": bool(b >= a)})
    if pairs:
        held = sum(p["non_decreasing"] for p in pairs)
        out["monotone_epsilon"] = {"verdict": _verdict(held * 9 >= 8 * len(pairs)),
                                   "rule": "non-decreasing in >= 8/9 of transition pairs",
                                   "held": held, "total": len(pairs), "pairs": pairs}
    else:
        out["monotone_epsilon"] = {"verdict": "not_applicable", "rule": "needs two epsilon targets"}

    order = [s for s in ("cold", "warm_shifted", "warm_matched") if s in config.strategies]
    finite = [e for e in eps if math.isfinite(e)]
    if len(order) >= 2 and finite:
        per_eps = []
        for e in eps:
            vals = {s: auc[(s, e, f_top)] for s in order}
            strict = all(vals[a] < vals[b] for a, b in zip(order, order[1:]))
            per_eps.append({"epsilon_target": e, "auroc": vals, "ordered": bool(strict),
                            "judged": math.isfinite(e)})
        ok = all(p["ordered"] for p in per_eps if p["judged"])
        out["strategy_ordering"] = {"verdict": _verdict(ok),
                                    "rule": " > ".join(reversed(order)) + " at every finite epsilon",
                                    "per_epsilon": per_eps}
    else:
        out["strategy_ordering"] = {"verdict": "not_applicable",
                                    "rule": "needs two strategies and a finite epsilon"}

    fr = sorted(config.fractions)
    e_fix = config.fraction_epsilon
    if len(fr) >= 2 and e_fix in config.epsilons:
        curves, gaps, mono = {}, {}, True
        for st in config.strategies:
            vals = [auc[(st, e_fix, f)] for f in fr]
            curves[st] = vals
            gaps[st] = vals[-1] - vals[0]
            mono &= all(b >= a for a, b in zip(vals, vals[1:]))
        gap_ok = True
        if "cold" in gaps and "warm_matched" in gaps:
            gap_ok = gaps["cold"] > gaps["warm_matched"]
        out["fraction_scaling"] = {"verdict": _verdict(mono and gap_ok),
                                   "rule": "non-decreasing in fraction; cold gap > warm_matched gap",
                                   "epsilon_target": e_fix, "fractions": fr, "auroc": curves,
                                   "gap": gaps, "monotone": bool(mono), "gap_order": bool(gap_ok)}
    else:
        out["fraction_scaling"] = {"verdict": "not_applicable",
                                   "rule": "needs two fractions and fraction_epsilon in the grid"}
    return out


# ---------------------------------------------------------------- rendering

def _pct(m: dict | None) -> str:
    if not m or "mean" not in m:
        return "n/a"
    lo, hi = m["ci95"]
    return f"{100 * m['estimate']:.1f} ± {100 * m['sd']:.1f} [{100 * lo:.1f}, {100 * hi:.1f}]"


def _eps_text(e) -> str:
    if isinstance(e, str) or math.isinf(e):
        return "∞"
    return f"{e:.3g}"


def render_report(report, fmt: str = "json") -> str:
    """JSON (strict, sorted keys) or a markdown table of seed-level summary rows."""
    doc = report.to_dict() if isinstance(report, ExperimentReport) else report
    if fmt == "json":
        return dumps_report(doc)
    if fmt != "markdown":
        raise ParameterError(f"unknown report format {fmt!r}")
    attrs = doc.get("config", {}).get("attributes", [])
    fair = doc.get("config", {}).get("fairness", False)
    cols = ["Strategy", "ε target", "Range", "Fraction", "Seeds", "Achieved ε"]
    cols += [m.capitalize() if m != "auroc" else "AUROC" for m in UTILITY_METRICS]
    extra = [f"{a}:{m}" for a in attrs for m in FAIRNESS_METRICS] if fair else []
    cols += extra
    lines = ["Values: mean ± SD [95% CI], percent.", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in doc.get("summary", []):
        m = row.get("metrics", {})
        achieved = row.get("achieved_epsilon_mean")
        cells = [row["strategy"], _eps_text(row["epsilon_target"]), row["target_range"],
                 f"{row['fraction']:g}", str(row["n_seeds"]),
                 "n/a" if achieved is None else _eps_text(achieved)]
        cells += [_pct(m.get(name)) for name in list(UTILITY_METRICS) + extra]
        lines.append("| " + " | ".join(cells) + " |")
    comps = [c for c in doc.get("comparisons", []) if c["metric"] == "auroc"]
    if comps:
        lines += ["", "| Comparison | Fraction | ε target | ΔAUROC | P (FDR) |", "|---|---|---|---|---|"]
        for c in comps:
            a, b = c["a"], c["b"]
            label = (f"{a['strategy']} vs non-private" if c["kind"] == "vs_non_private"
                     else f"{a['strategy']} vs {b['strategy']}")
            diff = c.get("mean_difference")
            shown = c.get("p_display", c.get("error", "n/a"))
            if "p_floor" in c and c.get("p_adjusted") == 0:
                shown += f" (resolution {c['p_floor']})"
            lines.append(f"| {label} | {c['fraction']:g} | {_eps_text(c['epsilon_target'])} | "
                         f"{'n/a' if diff is None else f'{100 * diff:+.1f}'} | "
                         f"{shown} |")
    trends = doc.get("trends", {})
    if trends:
        lines += ["", "| Trend | Verdict |", "|---|---|"]
        lines += [f"| {k} | {v['verdict']} |" for k, v in sorted(trends.items())]
    return "\n".join(lines) + "\n"
