"""Synthetic multilabel cohorts, patient-wise splits and file formats.

Each patient gets a sex and an age group, then one label vector drawn from
prevalences that depend on (sex, age group). Every image of the patient
carries the patient's labels and its own feature vector

    x = (2y - 1) @ A + noise_scale[age] * N(0, I) / signal_strength

where ``A`` (labels x features, unit-norm rows) is fixed by ``task_seed``.
``distribution_shift`` flips the sign of that fraction of the entries of
``A``, which is how source cohorts for generic pretraining are built.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dpfb.errors import ParameterError, SchemaError
from dpfb.metrics import AGE_GROUPS, SEXES, PredictionTable

LABEL_NAMES = ("atelectasis", "cardiomegaly", "effusion", "pneumonia", "no_finding")
SPLITS = ("train", "test")

_BASE_PREVALENCE = (0.15, 0.12, 0.18, 0.08, 0.40)
_AGE_FACTOR = {"<40": 0.5, "40-70": 1.0, ">70": 1.6}
_SEX_FACTOR = {"F": 0.95, "M": 1.05}


def default_prevalence(label_count: int = 5) -> dict[tuple[str, str], list[float]]:
    """Prevalence per (sex, age group) cell, rising steeply with age."""
    base = [_BASE_PREVALENCE[k % len(_BASE_PREVALENCE)] for k in range(label_count)]
    return {(s, a): [min(0.9, p * _AGE_FACTOR[a] * _SEX_FACTOR[s]) for p in base]
            for s in SEXES for a in AGE_GROUPS}


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 2500
    images_per_patient: tuple[int, int] = (1, 3)  # inclusive uniform range
    feature_dim: int = 20
    label_count: int = 5
    prevalence: dict | None = None  # {(sex, age_group): [p_k]}; None -> default_prevalence
    sex_mix: tuple[float, float] = (0.5, 0.5)
    age_mix: tuple[float, float, float] = (0.3, 0.45, 0.25)
    age_noise: tuple[float, float, float] = (1.0, 1.1, 1.25)
    signal_strength: float = 0.6
    distribution_shift: float = 0.0
    task_seed: int = 0
    seed: int = 0
    id_prefix: str = "P"

    def __post_init__(self):
        if self.n_patients < 1 or self.feature_dim < 1 or self.label_count < 1:
            raise ParameterError("n_patients, feature_dim and label_count must be >= 1")
        lo, hi = self.images_per_patient
        if not 1 <= lo <= hi:
            raise ParameterError(f"invalid images_per_patient range {self.images_per_patient}")
        for name, mix, size in (("sex_mix", self.sex_mix, 2), ("age_mix", self.age_mix, 3)):
            if len(mix) != size or min(mix) < 0 or not math.isclose(sum(mix), 1.0, abs_tol=1e-9):
                raise ParameterError(f"{name} must have {size} non-negative entries summing to 1")
        if len(self.age_noise) != 3 or min(self.age_noise) <= 0:
            raise ParameterError("age_noise needs three positive entries")
        if self.signal_strength < 0:
            raise ParameterError("signal_strength must be non-negative")
        if not 0 <= self.distribution_shift <= 1:
            raise ParameterError("distribution_shift must be in [0, 1]")
        for cell, probs in self.prevalence_table().items():
            if len(probs) != self.label_count or not all(0 < p < 1 for p in probs):
                raise ParameterError(f"prevalences for {cell} must be {self.label_count} values in (0, 1)")

    def prevalence_table(self) -> dict[tuple[str, str], list[float]]:
        table = self.prevalence if self.prevalence is not None else default_prevalence(self.label_count)
        missing = {(s, a) for s in SEXES for a in AGE_GROUPS} - set(table)
        if missing:
            raise ParameterError(f"prevalence missing cells {sorted(missing)}")
        return table

    @property
    def label_names(self) -> tuple[str, ...]:
        if self.label_count <= len(LABEL_NAMES):
            return LABEL_NAMES[:self.label_count]
        return tuple(f"label_{k}" for k in range(self.label_count))


@dataclass(frozen=True)
class Cohort:
    patient_id: np.ndarray
    sex: np.ndarray
    age_group: np.ndarray
    features: np.ndarray  # (n, d)
    labels: np.ndarray    # (n, K) int8
    label_names: tuple[str, ...]
    split: np.ndarray | None = field(default=None)

    def __post_init__(self):
        n = len(self.patient_id)
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise ParameterError("features and labels need one row per record")
        if self.labels.shape[1] != len(self.label_names):
            raise ParameterError("label columns and names disagree")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("features must be finite")
        if self.split is not None:
            if len(self.split) != n or not set(np.unique(self.split)) <= set(SPLITS):
                raise ParameterError("split tags must be 'train' or 'test'")
            shared = (set(self.patient_id[self.split == "train"])
                      & set(self.patient_id[self.split == "test"]))
            if shared:
                raise ParameterError(
                    f"patients in both splits: {sorted(shared)[:5]}")

    def __len__(self):
        return len(self.patient_id)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def label_count(self) -> int:
        return self.labels.shape[1]

    def take(self, rows) -> Cohort:
        rows = np.asarray(rows, dtype=np.intp)
        return Cohort(self.patient_id[rows], self.sex[rows], self.age_group[rows],
                      self.features[rows], self.labels[rows], self.label_names,
                      None if self.split is None else self.split[rows])

    def select(self, split: str) -> Cohort:
        if self.split is None:
            raise ParameterError("cohort has no split tags")
        return self.take(np.flatnonzero(self.split == split))

    def patients(self) -> np.ndarray:
        return np.unique(self.patient_id)

    def equals(self, other: Cohort) -> bool:
        same_split = ((self.split is None and other.split is None)
                      or (self.split is not None and other.split is not None
                          and np.array_equal(self.split, other.split)))
        return (self.label_names == other.label_names and same_split
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("patient_id", "sex", "age_group", "features", "labels")))


def generating_weights(spec: CohortSpec) -> np.ndarray:
    """Label-to-feature weights fixed by ``task_seed``, with ``distribution_shift`` applied."""
    rng = np.random.default_rng([spec.task_seed, 0])
    A = rng.normal(size=(spec.label_count, spec.feature_dim))
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    if spec.distribution_shift > 0:
        shift_rng = np.random.default_rng([spec.task_seed, 1])
        n_flip = int(round(spec.distribution_shift * A.size))
        flip = shift_rng.permutation(A.size)[:n_flip]
        A.flat[flip] *= -1
    return A


def generate(spec: CohortSpec) -> Cohort:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_patients
    sex = np.array(SEXES)[rng.choice(2, size=n, p=spec.sex_mix)]
    age_idx = rng.choice(3, size=n, p=spec.age_mix)
    age = np.array(AGE_GROUPS)[age_idx]
    prev = spec.prevalence_table()
    p = np.array([prev[(s, a)] for s, a in zip(sex, age)])
    labels = (rng.random((n, spec.label_count)) < p).astype(np.int8)
    lo, hi = spec.images_per_patient
    images = rng.integers(lo, hi + 1, size=n)

    rows = np.repeat(np.arange(n), images)
    A = generating_weights(spec)
    signal = (2.0 * labels[rows] - 1.0) @ A
    noise_scale = np.asarray(spec.age_noise)[age_idx[rows]][:, None]
    noise = rng.normal(size=signal.shape) * noise_scale
    if spec.signal_strength == 0:
        features = noise
    else:
        features = signal + noise / spec.signal_strength

    width = max(6, len(str(n - 1)))
    ids = np.array([f"{spec.id_prefix}{i:0{width}d}" for i in range(n)])
    return Cohort(ids[rows], sex[rows], age[rows], features, labels[rows].copy(),
                  spec.label_names)


def _n_of(fraction: float, total: int) -> int:
    # floor, tolerant of binary round-off such as 0.29 * 100
    return int(math.floor(fraction * total + 1e-9))


def patient_split(cohort: Cohort, test_fraction: float, seed: int) -> Cohort:
    """Tag rows train/test so that each patient lands wholly on one side."""
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    patients = cohort.patients()
    if len(patients) < 2:
        raise ParameterError("need at least two patients to split")
    n_test = min(max(_n_of(test_fraction, len(patients)), 1), len(patients) - 1)
    perm = np.random.default_rng(seed).permutation(len(patients))
    test_ids = patients[perm[:n_test]]
    split = np.where(np.isin(cohort.patient_id, test_ids), "test", "train")
    return replace(cohort, split=split)


def subsample_fraction(train: Cohort, fraction: float, seed: int) -> Cohort:
    """Keep the first ``floor(fraction * n_patients)`` patients of a seeded order.

    The order depends only on ``seed``, so smaller fractions are subsets of
    larger ones.
    """
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return train
    patients = train.patients()
    n_keep = _n_of(fraction, len(patients))
    if n_keep < 1:
        raise ParameterError(
            f"fraction {fraction} of {len(patients)} patients leaves none")
    perm = np.random.default_rng(seed).permutation(len(patients))
    kept = patients[perm[:n_keep]]
    return train.take(np.flatnonzero(np.isin(train.patient_id, kept)))


# ---------------------------------------------------------------- file formats

def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    text = Path(path).read_text(encoding="utf-8")
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: empty file, header required") from None
    rows = [(reader.line_num, r) for r in reader if r]
    return header, rows


def _float(value: str, line: int, column: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise SchemaError(f"line {line}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(x):
        raise SchemaError(f"line {line}: column {column!r} is not finite")
    return x


def _label(value: str, line: int, column: str) -> int:
    if value not in ("0", "1"):
        raise SchemaError(f"line {line}: column {column!r} must be 0 or 1, got {value!r}")
    return int(value)


def _check_demographics(pid, sex, age, line):
    if not pid:
        raise SchemaError(f"line {line}: empty patient_id")
    if sex not in SEXES:
        raise SchemaError(f"line {line}: sex must be one of {SEXES}, got {sex!r}")
    if age not in AGE_GROUPS:
        raise SchemaError(f"line {line}: age_group must be one of {AGE_GROUPS}, got {age!r}")


def _reject_duplicates(rows):
    seen = {}
    for line, r in rows:
        key = tuple(r)
        if key in seen:
            raise SchemaError(f"line {line}: duplicate of line {seen[key]} for patient {r[0]!r}")
        seen[key] = line


def write_cohort(cohort: Cohort, path) -> None:
    d = cohort.feature_dim
    header = (["patient_id", "sex", "age_group", "split"] + [f"f_{j}" for j in range(d)]
              + [f"y_{n}" for n in cohort.label_names])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(cohort)):
            split = "" if cohort.split is None else cohort.split[i]
            w.writerow([cohort.patient_id[i], cohort.sex[i], cohort.age_group[i], split]
                       + [repr(float(x)) for x in cohort.features[i]]
                       + [str(int(y)) for y in cohort.labels[i]])


def read_cohort(path) -> Cohort:
    header, rows = _read_rows(path)
    if header[:4] != ["patient_id", "sex", "age_group", "split"]:
        raise SchemaError(f"{path}: header must start with patient_id,sex,age_group,split")
    f_cols = [c for c in header[4:] if c.startswith("f_")]
    y_cols = header[4 + len(f_cols):]
    if [f"f_{j}" for j in range(len(f_cols))] != f_cols or not f_cols:
        raise SchemaError(f"{path}: feature columns must be f_0..f_(d-1)")
    if not y_cols or not all(c.startswith("y_") and len(c) > 2 for c in y_cols):
        raise SchemaError(f"{path}: label columns must follow features as y_<label>")
    _reject_duplicates(rows)
    ids, sexes, ages, splits, feats, labels = [], [], [], [], [], []
    for line, r in rows:
        if len(r) != len(header):
            raise SchemaError(f"line {line}: expected {len(header)} fields, got {len(r)}")
        _check_demographics(r[0], r[1], r[2], line)
        if r[3] not in ("",) + SPLITS:
            raise SchemaError(f"line {line}: split must be train, test or empty")
        ids.append(r[0])
        sexes.append(r[1])
        ages.append(r[2])
        splits.append(r[3])
        feats.append([_float(v, line, c) for v, c in zip(r[4:4 + len(f_cols)], f_cols)])
        labels.append([_label(v, line, c) for v, c in zip(r[4 + len(f_cols):], y_cols)])
    tagged = {s != "" for s in splits}
    if len(tagged) > 1:
        raise SchemaError(f"{path}: split must be set on every row or on none")
    split = np.array(splits) if tagged == {True} else None
    try:
        return Cohort(np.array(ids, dtype=str), np.array(sexes, dtype=str),
                      np.array(ages, dtype=str),
                      np.array(feats, dtype=np.float64).reshape(len(rows), len(f_cols)),
                      np.array(labels, dtype=np.int8).reshape(len(rows), len(y_cols)),
                      tuple(c[2:] for c in y_cols), split)
    except ParameterError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def write_predictions(table: PredictionTable, path) -> None:
    header = (["patient_id", "sex", "age_group"] + [f"y_{n}" for n in table.label_names]
              + [f"s_{n}" for n in table.label_names])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(table)):
            w.writerow([table.patient_id[i], table.sex[i], table.age_group[i]]
                       + [str(int(y)) for y in table.truths[i]]
                       + [repr(float(s)) for s in table.scores[i]])


def read_predictions(path) -> PredictionTable:
    header, rows = _read_rows(path)
    if header[:3] != ["patient_id", "sex", "age_group"]:
        raise SchemaError(f"{path}: header must start with patient_id,sex,age_group")
    rest = header[3:]
    k = len(rest) // 2
    y_cols, s_cols = rest[:k], rest[k:]
    names = tuple(c[2:] for c in y_cols)
    if (k == 0 or len(rest) % 2 or not all(c.startswith("y_") for c in y_cols)
            or s_cols != [f"s_{n}" for n in names]):
        raise SchemaError(f"{path}: expected y_<label>... then s_<label>... for the same labels")
    _reject_duplicates(rows)
    ids, sexes, ages, truths, scores = [], [], [], [], []
    for line, r in rows:
        if len(r) != len(header):
            raise SchemaError(f"line {line}: expected {len(header)} fields, got {len(r)}")
        _check_demographics(r[0], r[1], r[2], line)
        sc = [_float(v, line, c) for v, c in zip(r[3 + k:], s_cols)]
        for v, c in zip(sc, s_cols):
            if not 0 <= v <= 1:
                raise SchemaError(f"line {line}: score {c!r}={v} outside [0, 1] (patient {r[0]!r})")
        ids.append(r[0])
        sexes.append(r[1])
        ages.append(r[2])
        truths.append([_label(v, line, c) for v, c in zip(r[3:3 + k], y_cols)])
        scores.append(sc)
    return PredictionTable(np.array(ids, dtype=str), np.array(sexes, dtype=str),
                           np.array(ages, dtype=str),
                           np.array(truths, dtype=np.int8).reshape(len(rows), k),
                           np.array(scores, dtype=np.float64).reshape(len(rows), k), names)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _finite(obj):
    """Replace non-finite floats by strings so the output stays strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(_finite(json.loads(json.dumps(report, default=_json_default))),
                      indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report: dict, path) -> None:
    Path(path).write_text(dumps_report(report), encoding="utf-8")
