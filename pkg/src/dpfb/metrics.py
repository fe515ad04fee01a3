"""Utility and subgroup-fairness metrics for multilabel prediction tables.

Thresholds come from Youden's index on the whole table and are applied
unchanged to every subgroup. A case is predicted positive iff
``score >= threshold``. Subgroup metrics are averaged over labels first;
disparities are computed on those label averages.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from dpfb.errors import ParameterError, UndefinedMetricError

SEXES = ("F", "M")
AGE_GROUPS = ("<40", "40-70", ">70")
ATTRIBUTE_VOCAB = {"sex": SEXES, "age_group": AGE_GROUPS}


@dataclass(frozen=True)
class PredictionTable:
    patient_id: np.ndarray
    sex: np.ndarray
    age_group: np.ndarray
    truths: np.ndarray   # (n, K) of {0, 1}
    scores: np.ndarray   # (n, K) in [0, 1]
    label_names: tuple[str, ...]

    def __post_init__(self):
        n, k = self.scores.shape
        if self.truths.shape != (n, k) or len(self.label_names) != k:
            raise ParameterError("truths, scores and label_names disagree in shape")
        if not all(len(a) == n for a in (self.patient_id, self.sex, self.age_group)):
            raise ParameterError("row attributes must have one entry per row")
        if n and not np.all((self.scores >= 0) & (self.scores <= 1)):
            raise ParameterError("scores must lie in [0, 1]")
        if n and not np.all((self.truths == 0) | (self.truths == 1)):
            raise ParameterError("truths must be 0 or 1")
        if any(not str(p) for p in self.patient_id):
            raise ParameterError("patient_id must be non-empty")

    def __len__(self):
        return self.scores.shape[0]

    def take(self, rows) -> PredictionTable:
        # row subsets of a valid table are valid, so skip re-validation (hot in the bootstrap)
        rows = np.asarray(rows, dtype=np.intp)
        out = object.__new__(PredictionTable)
        for name, value in (("patient_id", self.patient_id[rows]), ("sex", self.sex[rows]),
                            ("age_group", self.age_group[rows]), ("truths", self.truths[rows]),
                            ("scores", self.scores[rows]), ("label_names", self.label_names)):
            object.__setattr__(out, name, value)
        return out

    def attribute(self, name: str) -> np.ndarray:
        if name not in ATTRIBUTE_VOCAB:
            raise ParameterError(f"unknown attribute {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class Group:
    label: str
    rows: np.ndarray

    @property
    def size(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class SubgroupPartition:
    attribute: str
    groups: tuple[Group, ...]


@dataclass
class Rates:
    accuracy: float
    sensitivity: float  # nan when the slice has no positives
    specificity: float  # nan when the slice has no negatives

    @property
    def fpr(self) -> float:
        return 1.0 - self.specificity


@dataclass
class MetricReport:
    label_names: tuple[str, ...]
    auroc: list[float]
    accuracy: list[float]
    sensitivity: list[float]
    specificity: list[float]
    thresholds: list[float]

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(self.auroc))

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def mean_sensitivity(self) -> float:
        return float(np.mean(self.sensitivity))

    @property
    def mean_specificity(self) -> float:
        return float(np.mean(self.specificity))

    @property
    def mean_fpr(self) -> float:
        return 1.0 - self.mean_specificity

    def to_dict(self) -> dict:
        per_label = {
            name: {"auroc": a, "accuracy": acc, "sensitivity": se, "specificity": sp,
                   "fpr": 1.0 - sp, "threshold": t}
            for name, a, acc, se, sp, t in zip(self.label_names, self.auroc, self.accuracy,
                                               self.sensitivity, self.specificity,
                                               self.thresholds)}
        return {"per_label": per_label,
                "mean": {"auroc": self.mean_auroc, "accuracy": self.mean_accuracy,
                         "sensitivity": self.mean_sensitivity,
                         "specificity": self.mean_specificity, "fpr": self.mean_fpr}}


@dataclass
class GroupSummary:
    """Label-averaged metrics of one subgroup, with the labels left out of each."""
    label: str
    size: int
    auroc: float
    accuracy: float
    sensitivity: float
    specificity: float
    excluded: dict[str, list[str]] = field(default_factory=dict)

    @property
    def fpr(self) -> float:
        return 1.0 - self.specificity


@dataclass
class AttributeFairness:
    attribute: str
    auroc_disparity: float
    eod: float
    od: float
    ptd: dict[str, float]
    groups: list[GroupSummary]

    def to_dict(self) -> dict:
        return {
            "auroc_disparity": self.auroc_disparity, "eod": self.eod, "od": self.od,
            "ptd": dict(self.ptd),
            "groups": {g.label: {"n": g.size, "auroc": g.auroc, "accuracy": g.accuracy,
                                 "sensitivity": g.sensitivity, "specificity": g.specificity,
                                 "fpr": g.fpr, "excluded_labels": g.excluded}
                       for g in self.groups}}


@dataclass
class FairnessReport:
    thresholds: list[float]
    attributes: dict[str, AttributeFairness]

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds),
                "attributes": {k: v.to_dict() for k, v in self.attributes.items()}}


def _check_binary(truths: np.ndarray) -> tuple[int, int]:
    n_pos = int(np.count_nonzero(truths))
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"metric undefined: {n_pos} positives and {n_neg} negatives")
    return n_pos, n_neg


def auroc(scores, truths) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    n_pos, n_neg = _check_binary(truths)
    ranks = rankdata(scores)  # average ranks, exact multiples of 1/2
    u = ranks[truths == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def youden_threshold(scores, truths) -> float:
    """Observed score maximising TPR - FPR; ties go to the smaller threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    n_pos, n_neg = _check_binary(truths)
    candidates = np.unique(scores)
    pos = np.sort(scores[truths == 1])
    neg = np.sort(scores[truths == 0])
    tp = n_pos - np.searchsorted(pos, candidates, side="left")
    fp = n_neg - np.searchsorted(neg, candidates, side="left")
    # TPR - FPR scaled by n_pos * n_neg stays in exact integer arithmetic
    j = tp.astype(np.int64) * n_neg - fp.astype(np.int64) * n_pos
    return float(candidates[int(np.argmax(j))])


def confusion_at(scores, truths, threshold: float) -> Rates:
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if len(scores) == 0:
        raise UndefinedMetricError("confusion rates of an empty table")
    if not math.isfinite(threshold):
        raise ParameterError(f"threshold must be finite, got {threshold}")
    pred = scores >= threshold
    pos = truths == 1
    tp = np.count_nonzero(pred & pos)
    tn = np.count_nonzero(~pred & ~pos)
    n_pos = np.count_nonzero(pos)
    n_neg = len(truths) - n_pos
    return Rates(accuracy=(tp + tn) / len(truths),
                 sensitivity=tp / n_pos if n_pos else math.nan,
                 specificity=tn / n_neg if n_neg else math.nan)


def cohort_thresholds(table: PredictionTable) -> list[float]:
    return [youden_threshold(table.scores[:, k], table.truths[:, k])
            for k in range(len(table.label_names))]


def evaluate(table: PredictionTable, thresholds=None) -> MetricReport:
    """Per-label and label-averaged utility metrics on the whole table."""
    k_labels = len(table.label_names)
    if thresholds is None:
        thresholds = cohort_thresholds(table)
    aucs, accs, sens, specs = [], [], [], []
    for k in range(k_labels):
        s, y = table.scores[:, k], table.truths[:, k]
        aucs.append(auroc(s, y))
        r = confusion_at(s, y, thresholds[k])
        accs.append(r.accuracy)
        sens.append(r.sensitivity)
        specs.append(r.specificity)
    return MetricReport(table.label_names, aucs, accs, sens, specs, list(thresholds))


def mean_auroc(table: PredictionTable) -> float:
    return float(np.mean([auroc(table.scores[:, k], table.truths[:, k])
                          for k in range(len(table.label_names))]))


def partition(table: PredictionTable, attribute: str) -> SubgroupPartition:
    """Split rows by a demographic attribute; empty groups are omitted."""
    values = table.attribute(attribute)
    groups = []
    for label in ATTRIBUTE_VOCAB[attribute]:
        rows = np.flatnonzero(values == label)
        if len(rows):
            groups.append(Group(label, rows))
    unknown = set(np.unique(values)) - set(ATTRIBUTE_VOCAB[attribute])
    if unknown:
        raise ParameterError(f"unexpected {attribute} values {sorted(unknown)}")
    return SubgroupPartition(attribute, tuple(groups))


def max_pairwise_gap(values) -> float:
    """max over i != j of |v_i - v_j|."""
    values = list(values)
    if len(values) < 2:
        raise UndefinedMetricError("disparity needs at least two groups")
    return max(abs(a - b) for a, b in itertools.combinations(values, 2))


def ptd_from_accuracies(accuracies, sizes) -> list[float]:
    """Signed accuracy gap of each group against the size-weighted rest.

    Two groups give the symmetric difference ``A_1 - A_2``; more groups use
    the one-vs-rest form weighted by group sizes.
    """
    acc = [float(a) for a in accuracies]
    n = [float(s) for s in sizes]
    if len(acc) < 2 or len(acc) != len(n):
        raise UndefinedMetricError("PtD needs at least two groups")
    if len(acc) == 2:
        return [acc[0] - acc[1], acc[1] - acc[0]]
    return [a - ptd_rest_mean(acc, n, i) for i, a in enumerate(acc)]


def ptd_rest_mean(acc, n, i) -> float:
    rest = [j for j in range(len(acc)) if j != i]
    return sum(n[j] * acc[j] for j in rest) / sum(n[j] for j in rest)


def _label_mean(values, names) -> tuple[float, list[str]]:
    kept = [v for v in values if not math.isnan(v)]
    dropped = [nm for v, nm in zip(values, names) if math.isnan(v)]
    return (float(np.mean(kept)) if kept else math.nan), dropped


def group_summary(table: PredictionTable, group: Group, thresholds) -> GroupSummary:
    names = table.label_names
    sub = table.take(group.rows)
    aucs, accs, sens, specs = [], [], [], []
    for k in range(len(names)):
        s, y = sub.scores[:, k], sub.truths[:, k]
        try:
            aucs.append(auroc(s, y))
        except UndefinedMetricError:
            aucs.append(math.nan)
        r = confusion_at(s, y, thresholds[k])
        accs.append(r.accuracy)
        sens.append(r.sensitivity)
        specs.append(r.specificity)
    excluded = {}
    means = {}
    for metric, vals in (("auroc", aucs), ("sensitivity", sens), ("specificity", specs)):
        means[metric], dropped = _label_mean(vals, names)
        if dropped:
            excluded[metric] = dropped
    return GroupSummary(group.label, group.size, means["auroc"], float(np.mean(accs)),
                        means["sensitivity"], means["specificity"], excluded)


def _summaries(part, table, thresholds):
    if thresholds is None:
        thresholds = cohort_thresholds(table)
    return [group_summary(table, g, thresholds) for g in part.groups]


def _require_defined(summaries, metric, what):
    bad = [s.label for s in summaries if math.isnan(getattr(s, metric))]
    if bad:
        raise UndefinedMetricError(f"{what} undefined: groups {bad} have no evaluable label")


def auroc_disparity(part: SubgroupPartition, table: PredictionTable) -> float:
    """Largest gap in label-averaged AUROC between any two subgroups.

    Groups in which no label has both classes are dropped; fewer than two
    remaining groups is an error.
    """
    # AUROC is threshold free; thresholds only feed the unused rate fields
    dummy = [0.5] * len(table.label_names)
    summaries = [s for s in _summaries(part, table, dummy) if not math.isnan(s.auroc)]
    return max_pairwise_gap(s.auroc for s in summaries)


def eod(part: SubgroupPartition, table: PredictionTable, thresholds=None) -> float:
    summaries = _summaries(part, table, thresholds)
    _require_defined(summaries, "sensitivity", "EOD")
    return max_pairwise_gap(s.sensitivity for s in summaries)


def od(part: SubgroupPartition, table: PredictionTable, thresholds=None) -> float:
    summaries = _summaries(part, table, thresholds)
    _require_defined(summaries, "specificity", "OD")
    return max_pairwise_gap(s.fpr for s in summaries)


def ptd(part: SubgroupPartition, table: PredictionTable, thresholds=None) -> dict[str, float]:
    summaries = _summaries(part, table, thresholds)
    values = ptd_from_accuracies([s.accuracy for s in summaries], [s.size for s in summaries])
    return {s.label: v for s, v in zip(summaries, values)}


def audit(table: PredictionTable, attributes=("sex", "age_group"), thresholds=None) -> FairnessReport:
    """Full fairness audit for each attribute using whole-table thresholds."""
    if thresholds is None:
        thresholds = cohort_thresholds(table)
    out = {}
    for attr in attributes:
        part = partition(table, attr)
        summaries = _summaries(part, table, thresholds)
        auc_groups = [s for s in summaries if not math.isnan(s.auroc)]
        _require_defined(summaries, "sensitivity", "EOD")
        _require_defined(summaries, "specificity", "OD")
        out[attr] = AttributeFairness(
            attribute=attr,
            auroc_disparity=max_pairwise_gap(s.auroc for s in auc_groups),
            eod=max_pairwise_gap(s.sensitivity for s in summaries),
            od=max_pairwise_gap(s.fpr for s in summaries),
            ptd=dict(zip((s.label for s in summaries),
                         ptd_from_accuracies([s.accuracy for s in summaries],
                                             [s.size for s in summaries]))),
            groups=summaries)
    return FairnessReport(list(thresholds), out)
