"""Patient-level bootstrap, paired bootstrap tests and FDR adjustment.

Reproducibility contract: resample indices come from numpy's PCG64 bit
generator seeded through ``numpy.random.SeedSequence(seed)`` (i.e.
``numpy.random.default_rng(seed)``). Unique patient ids are sorted
lexicographically, and each resample draws ``n_patients`` patient positions
with ``Generator.integers(0, n_patients, n_patients)``. Resamples are
drawn in order from a single generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dpfb.errors import DpfbError, ParameterError, StatisticsError

GENERATOR = "numpy.random.PCG64 via SeedSequence(seed)"
MAX_UNDEFINED_FRACTION = 0.05


@dataclass(frozen=True)
class BootstrapConfig:
    n_resamples: int = 1000
    level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.n_resamples < 2:
            raise ParameterError("n_resamples must be at least 2")
        if not 0 < self.level < 1:
            raise ParameterError("confidence level must be in (0, 1)")


@dataclass
class BootstrapResult:
    estimate: float      # metric on the full table
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    n_resamples: int
    n_undefined: int = 0
    values: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self, metric: str, seed: int) -> dict:
        return {"metric": metric, "estimate": self.estimate, "mean": self.mean, "sd": self.sd,
                "ci95": [self.ci_low, self.ci_high], "n_resamples": self.n_resamples,
                "n_undefined": self.n_undefined, "seed": seed}


@dataclass
class PairedTestResult:
    p_value: float
    mean_difference: float
    n_resamples: int
    p_display: str = ""

    @property
    def resolution(self) -> float:
        """Smallest non-zero p-value the test can produce."""
        return 2.0 / self.n_resamples

    @property
    def below_resolution(self) -> bool:
        return self.p_value < self.resolution

    def to_dict(self, p_adjusted: float | None = None) -> dict:
        out = {"p_raw": self.p_value, "mean_difference": self.mean_difference,
               "n_resamples": self.n_resamples, "p_display": self.p_display}
        if self.below_resolution:
            out["p_floor"] = f"P < {self.resolution:g}"
        if p_adjusted is not None:
            out["p_adjusted"] = p_adjusted
            out["p_display"] = format_p(p_adjusted)
        return out


class _PatientIndex:
    """Rows grouped by patient, patients in sorted id order."""

    def __init__(self, patient_ids: Sequence[str]):
        ids = np.asarray(patient_ids)
        if len(ids) == 0:
            raise ParameterError("cannot resample an empty table")
        self.unique, inverse = np.unique(ids, return_inverse=True)
        self.order = np.argsort(inverse, kind="stable")
        self.counts = np.bincount(inverse, minlength=len(self.unique))
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    def rows_for(self, drawn: np.ndarray) -> np.ndarray:
        counts = self.counts[drawn]
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return self.order[np.repeat(self.starts[drawn], counts) + offsets]

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        n = len(self.unique)
        return self.rows_for(rng.integers(0, n, n))


def patient_resample(patient_ids: Sequence[str], rng: np.random.Generator) -> np.ndarray:
    """Row indices of one patient-level bootstrap resample.

    Patients are drawn with replacement; each draw contributes all rows of
    that patient.
    """
    return _PatientIndex(patient_ids).draw(rng)


def resample_indices(patient_ids: Sequence[str], config: BootstrapConfig) -> list[np.ndarray]:
    """The full, shareable list of resamples for one table."""
    index = _PatientIndex(patient_ids)
    rng = np.random.default_rng(config.seed)
    return [index.draw(rng) for _ in range(config.n_resamples)]


def _evaluate_resamples(metric: Callable, table, indices) -> np.ndarray:
    out = np.empty(len(indices))
    for r, rows in enumerate(indices):
        try:
            out[r] = metric(table.take(rows))
        except DpfbError:
            out[r] = np.nan
    return out


def _check_undefined(values: np.ndarray) -> int:
    bad = int(np.count_nonzero(np.isnan(values)))
    if bad > MAX_UNDEFINED_FRACTION * len(values):
        raise StatisticsError(
            f"metric undefined on {bad} of {len(values)} resamples "
            f"(limit {MAX_UNDEFINED_FRACTION:.0%}); typically a label or subgroup "
            f"with a single class in many resamples")
    return bad


def summarize(values: np.ndarray, estimate: float, level: float = 0.95) -> BootstrapResult:
    """Mean, sd (ddof=1) and linear-interpolation percentile CI of resample values."""
    values = np.asarray(values, dtype=np.float64)
    bad = _check_undefined(values)
    ok = values[~np.isnan(values)]
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(ok, [tail, 100 - tail], method="linear")
    return BootstrapResult(float(estimate), float(ok.mean()), float(ok.std(ddof=1)),
                           float(lo), float(hi), len(values), bad, values)


def bootstrap(metric: Callable, table, config: BootstrapConfig = BootstrapConfig(),
              indices: list[np.ndarray] | None = None) -> BootstrapResult:
    """Bootstrap distribution of ``metric`` over patient-level resamples of ``table``."""
    estimate = metric(table)
    if indices is None:
        indices = resample_indices(table.patient_id, config)
    return summarize(_evaluate_resamples(metric, table, indices), estimate, config.level)


def paired_p_value(diffs: np.ndarray) -> float:
    """Two-sided ``2 * min(P(d <= 0), P(d >= 0))`` capped at 1."""
    diffs = np.asarray(diffs)
    if len(diffs) == 0:
        raise StatisticsError("no resamples to test")
    le = np.count_nonzero(diffs <= 0) / len(diffs)
    ge = np.count_nonzero(diffs >= 0) / len(diffs)
    return min(1.0, 2.0 * min(le, ge))


def paired_from_values(values_a: np.ndarray, values_b: np.ndarray) -> PairedTestResult:
    """Paired test from two resample distributions built on identical indices."""
    values_a, values_b = np.asarray(values_a), np.asarray(values_b)
    if values_a.shape != values_b.shape:
        raise ParameterError("paired distributions must have the same resamples")
    d = values_a - values_b
    _check_undefined(d)
    d = d[~np.isnan(d)]
    p = paired_p_value(d)
    return PairedTestResult(p, float(d.mean()), len(values_a), format_p(p))


def paired_test(metric_a: Callable, metric_b: Callable, table,
                config: BootstrapConfig = BootstrapConfig(),
                indices: list[np.ndarray] | None = None) -> PairedTestResult:
    if indices is None:
        indices = resample_indices(table.patient_id, config)
    a = _evaluate_resamples(metric_a, table, indices)
    b = _evaluate_resamples(metric_b, table, indices)
    return paired_from_values(a, b)


def bh_fdr(p_values: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values in the input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1:
        raise ParameterError("p-values must be a flat sequence")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ParameterError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


def format_p(p: float) -> str:
    """``P < 0.001`` below 0.001, otherwise two significant figures."""
    if math.isnan(p) or not 0 <= p <= 1:
        raise ParameterError(f"p-value must be in [0, 1], got {p}")
    if p < 0.001:
        return "P < 0.001"
    return f"P = {p:#.2g}"
