import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats as sps

from dpfb import data, metrics, trainer
from dpfb.errors import ParameterError, SchemaError


@pytest.fixture(scope="module")
def cohort():
    return data.patient_split(data.generate(data.CohortSpec(n_patients=400, seed=3)), 0.25, 3)


class TestGenerate:
    def test_deterministic(self):
        spec = data.CohortSpec(n_patients=50, seed=8)
        assert data.generate(spec).equals(data.generate(spec))

    def test_images_per_patient(self):
        c = data.generate(data.CohortSpec(n_patients=300, seed=0))
        _, counts = np.unique(c.patient_id, return_counts=True)
        assert counts.min() == 1 and counts.max() == 3
        # a patient's labels and demographics are shared by all of their images
        for pid in c.patients()[:50]:
            rows = c.patient_id == pid
            assert len(np.unique(c.labels[rows], axis=0)) == 1
            assert len(set(c.sex[rows])) == 1

    def test_prevalence_converges(self):
        prev = data.default_prevalence()
        for age in metrics.AGE_GROUPS:
            prev[("M", age)][2] = 0.3
        spec = data.CohortSpec(n_patients=20_000, images_per_patient=(1, 1), prevalence=prev, seed=5)
        c = data.generate(spec)
        male = c.labels[c.sex == "M", 2]
        lo, hi = sps.binom.interval(0.99, len(male), 0.3)
        assert lo <= male.sum() <= hi

    def test_no_signal_gives_chance_auroc(self):
        spec = data.CohortSpec(n_patients=12_000, signal_strength=0.0, seed=2, images_per_patient=(1, 1))
        c = data.patient_split(data.generate(spec), 0.5, 0)
        test = c.select("test")
        cfg = trainer.TrainConfig(learning_rate=0.01, max_steps=300, clip_norm=math.inf)
        model, _ = trainer.train(c.select("train"), cfg, trainer.cold_start(20, 0, 5, 0))
        assert abs(metrics.mean_auroc(trainer.predict(model, test)) - 0.5) < 0.02
        A = data.generating_weights(spec)
        oracle = np.mean([metrics.auroc(test.features @ A[k], test.labels[:, k]) for k in range(5)])
        assert abs(oracle - 0.5) < 0.02

    def test_signal_strength_orders_difficulty(self):
        def oracle_auc(strength):
            spec = data.CohortSpec(n_patients=4000, signal_strength=strength, seed=1)
            c = data.generate(spec)
            A = data.generating_weights(spec)
            # score each label by the projection on its generating direction
            return np.mean([metrics.auroc(c.features @ A[k], c.labels[:, k]) for k in range(5)])
        assert oracle_auc(0.3) < oracle_auc(0.6) < oracle_auc(1.5)

    def test_shift_flips_fraction(self):
        base = data.generating_weights(data.CohortSpec())
        shifted = data.generating_weights(data.CohortSpec(distribution_shift=0.3))
        assert np.mean(np.sign(base) != np.sign(shifted)) == pytest.approx(0.3, abs=0.005)

    def test_invalid_specs(self):
        with pytest.raises(ParameterError):
            data.CohortSpec(sex_mix=(0.7, 0.7))
        with pytest.raises(ParameterError):
            data.CohortSpec(distribution_shift=1.5)
        bad = data.default_prevalence()
        bad[("F", "<40")][0] = 1.0
        with pytest.raises(ParameterError):
            data.CohortSpec(prevalence=bad)


class TestSplits:
    def test_disjoint(self, cohort):
        train, test = cohort.select("train"), cohort.select("test")
        assert not set(train.patient_id) & set(test.patient_id)
        assert len(train) + len(test) == len(cohort)

    def test_exact_count(self):
        c = data.generate(data.CohortSpec(n_patients=1000, images_per_patient=(1, 1)))
        s = data.patient_split(c, 0.2, 0)
        assert np.count_nonzero(s.split == "test") == 200

    def test_overlap_rejected(self, cohort):
        split = cohort.split.copy()
        pid = cohort.patient_id[0]
        rows = np.flatnonzero(cohort.patient_id == pid)
        if len(rows) == 1:
            pid = cohort.patient_id[np.flatnonzero(np.unique(cohort.patient_id, return_counts=True)[1] > 1)[0]]
        rows = np.flatnonzero(cohort.patient_id == pid)
        split[rows[0]] = "train"
        split[rows[1]] = "test"
        with pytest.raises(ParameterError, match="both splits"):
            replace(cohort, split=split)

    def test_too_few_patients(self):
        c = data.generate(data.CohortSpec(n_patients=1))
        with pytest.raises(ParameterError):
            data.patient_split(c, 0.5, 0)

    def test_nested_fractions(self, cohort):
        train = cohort.select("train")
        sets = [set(data.subsample_fraction(train, f, 11).patient_id) for f in (0.1, 0.25, 0.5, 1.0)]
        assert all(a < b for a, b in zip(sets, sets[1:]))
        assert data.subsample_fraction(train, 1.0, 11) is train

    def test_floor_count(self):
        c = data.generate(data.CohortSpec(n_patients=10_000, images_per_patient=(1, 1)))
        assert len(data.subsample_fraction(c, 0.5, 0).patients()) == 5000
        assert len(data.subsample_fraction(c, 0.29, 0).patients()) == 2900

    def test_empty_fraction(self):
        c = data.generate(data.CohortSpec(n_patients=5))
        with pytest.raises(ParameterError):
            data.subsample_fraction(c, 0.1, 0)


class TestFiles:
    def test_cohort_round_trip(self, cohort, tmp_path):
        data.write_cohort(cohort, tmp_path / "c.csv")
        assert data.read_cohort(tmp_path / "c.csv").equals(cohort)

    def test_untagged_round_trip(self, tmp_path):
        c = data.generate(data.CohortSpec(n_patients=20))
        data.write_cohort(c, tmp_path / "c.csv")
        back = data.read_cohort(tmp_path / "c.csv")
        assert back.split is None and back.equals(c)

    def test_predictions_round_trip_and_crlf(self, cohort, tmp_path):
        model = trainer.cold_start(20, 0, 5, 0)
        table = trainer.predict(model, cohort)
        p = tmp_path / "p.csv"
        data.write_predictions(table, p)
        back = data.read_predictions(p)
        assert np.array_equal(back.scores, table.scores)
        assert np.array_equal(back.truths, table.truths)
        crlf = tmp_path / "crlf.csv"
        crlf.write_bytes(p.read_bytes().replace(b"\n", b"\r\n"))
        again = data.read_predictions(crlf)
        assert np.array_equal(again.scores, back.scores)
        assert np.array_equal(again.patient_id, back.patient_id)

    def test_score_out_of_range(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("patient_id,sex,age_group,y_a,s_a\nP1,F,<40,1,0.5\nP2,M,>70,0,1.5\n")
        with pytest.raises(SchemaError, match=r"line 3.*P2"):
            data.read_predictions(p)

    @pytest.mark.parametrize("body,match", [
        ("P1,F,<40,1\n", "expected 5 fields"),
        ("P1,X,<40,1,0.5\n", "sex"),
        ("P1,F,<40,2,0.5\n", "0 or 1"),
        ("P1,F,<40,1,abc\n", "not a number"),
        ("P1,F,<40,1,0.5\nP1,F,<40,1,0.5\n", "duplicate"),
    ])
    def test_malformed_rows(self, tmp_path, body, match):
        p = tmp_path / "p.csv"
        p.write_text("patient_id,sex,age_group,y_a,s_a\n" + body)
        with pytest.raises(SchemaError, match=match):
            data.read_predictions(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("id,sex,age_group,y_a,s_a\n")
        with pytest.raises(SchemaError):
            data.read_predictions(p)
        p.write_text("")
        with pytest.raises(SchemaError, match="header"):
            data.read_predictions(p)

    def test_report_json_is_strict(self, tmp_path):
        data.write_report({"eps": math.inf, "x": np.float64(0.1), "v": np.arange(2)}, tmp_path / "r.json")
        text = (tmp_path / "r.json").read_text()
        assert '"inf"' in text and "Infinity" not in text
