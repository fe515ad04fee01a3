from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfb import stats as S
from dpfb.errors import ParameterError, StatisticsError, UndefinedMetricError


@dataclass
class Column:
    """Minimal resamplable table: one value per row."""
    patient_id: np.ndarray
    values: np.ndarray

    def take(self, rows):
        return Column(self.patient_id[rows], self.values[rows])


def column_table(values, patients=None):
    patients = patients if patients is not None else [f"p{i}" for i in range(len(values))]
    return Column(np.array(patients), np.asarray(values, dtype=float))


def col_mean(t):
    return float(t.values.mean())


class TestPatientResample:
    def test_single_row_patients_is_row_bootstrap(self):
        ids = [f"p{i}" for i in range(7)]
        rows = S.patient_resample(ids, np.random.default_rng(4))
        # sorted unique ids coincide with row order here, so rows are the raw draws
        ref = np.random.default_rng(4).integers(0, 7, 7)
        assert rows.tolist() == ref.tolist()

    def test_one_patient(self):
        for seed in range(5):
            assert sorted(S.patient_resample(["a", "a", "a"], np.random.default_rng(seed))) == [0, 1, 2]

    def test_rows_repeat_with_draws(self):
        ids = ["b", "a", "b", "c", "b"]  # b owns rows 0, 2, 4
        idx = S._PatientIndex(ids)
        drawn = np.array([1, 1, 0])  # b twice, then a
        assert idx.rows_for(drawn).tolist() == [0, 2, 4, 0, 2, 4, 1]

    def test_patient_count_preserved(self):
        ids = np.repeat([f"p{i}" for i in range(50)], np.arange(50) % 3 + 1)
        rows = S.patient_resample(ids, np.random.default_rng(0))
        drawn_patients = S._PatientIndex(ids)
        # each resample draws exactly 50 patients: rows sum to the drawn patients' sizes
        ref = np.random.default_rng(0).integers(0, 50, 50)
        assert len(rows) == drawn_patients.counts[ref].sum()

    def test_empty(self):
        with pytest.raises(ParameterError):
            S.patient_resample([], np.random.default_rng(0))


class TestBootstrap:
    def test_constant_metric(self):
        res = S.bootstrap(lambda t: 0.7, column_table([1, 2, 3]), S.BootstrapConfig(200, seed=1))
        assert res.sd == 0 and res.ci_low == res.ci_high == 0.7

    def test_matches_reimplementation(self):
        vals = [0.2, 0.5, 0.9]
        cfg = S.BootstrapConfig(500, seed=42)
        res = S.bootstrap(col_mean, column_table(vals), cfg)
        rng = np.random.default_rng(42)
        col = np.array(vals)
        ref = np.array([col[rng.integers(0, 3, 3)].mean() for _ in range(500)])
        assert np.array_equal(res.values, ref)
        assert res.mean == ref.mean()
        assert res.sd == ref.std(ddof=1)
        assert [res.ci_low, res.ci_high] == np.percentile(ref, [2.5, 97.5]).tolist()

    def test_ci_endpoints_are_interpolated_order_stats(self):
        rng = np.random.default_rng(3)
        res = S.bootstrap(col_mean, column_table(rng.random(40)), S.BootstrapConfig(101, seed=3))
        srt = np.sort(res.values)
        # with 101 values the 2.5th/97.5th percentiles sit between order statistics 2,3 and 97,98
        assert srt[2] <= res.ci_low <= srt[3]
        assert srt[97] <= res.ci_high <= srt[98]
        assert res.ci_low <= res.ci_high

    def test_width_shrinks_like_sqrt_n(self):
        rng = np.random.default_rng(7)
        widths = {}
        for n in (100, 400):
            w = []
            for rep in range(8):
                t = column_table(rng.normal(size=n))
                r = S.bootstrap(col_mean, t, S.BootstrapConfig(400, seed=rep))
                w.append(r.ci_high - r.ci_low)
            widths[n] = np.mean(w)
        assert widths[100] / widths[400] == pytest.approx(2.0, rel=0.1)

    def test_too_many_undefined(self):
        def flaky(t):
            if t.values[0] > 0.5:
                raise UndefinedMetricError("nope")
            return 1.0
        t = column_table([0.1, 0.9])
        with pytest.raises(StatisticsError, match="undefined"):
            S.bootstrap(flaky, t, S.BootstrapConfig(100, seed=0))

    def test_deterministic(self):
        t = column_table(np.arange(30) / 30)
        a = S.bootstrap(col_mean, t, S.BootstrapConfig(50, seed=9))
        b = S.bootstrap(col_mean, t, S.BootstrapConfig(50, seed=9))
        assert np.array_equal(a.values, b.values)


class TestPairedTest:
    def test_self_comparison(self):
        t = column_table(np.linspace(0, 1, 20))
        res = S.paired_test(col_mean, col_mean, t, S.BootstrapConfig(1000, seed=0))
        assert res.p_value == 1.0
        assert res.p_display == "P = 1.0"

    def test_constant_shift(self):
        t = column_table(np.linspace(0, 1, 20))
        res = S.paired_test(lambda x: col_mean(x) + 1, col_mean, t, S.BootstrapConfig(1000, seed=0))
        assert res.p_value == 0.0
        assert res.below_resolution and res.resolution == 0.002
        assert res.p_display == "P < 0.001"
        assert res.to_dict()["p_floor"] == "P < 0.002"

    def test_enumerated_overlap(self):
        # ten hand-written resample differences: 3 negative, 1 zero, 6 positive
        d = np.array([0.3, -0.1, 0.2, 0.0, 0.4, -0.2, 0.1, 0.5, -0.05, 0.2])
        # P(d <= 0) = 4/10, P(d >= 0) = 7/10, p = 2 * 0.4
        assert S.paired_p_value(d) == pytest.approx(0.8)
        res = S.paired_from_values(d + 1.0, np.ones(10))
        assert res.p_value == pytest.approx(0.8)
        assert res.mean_difference == pytest.approx(d.mean())

    def test_shared_indices(self):
        t = column_table(np.linspace(0, 1, 15))
        seen = {"a": [], "b": []}

        def probe(tag):
            def metric(x):
                seen[tag].append(tuple(x.patient_id))
                return col_mean(x)
            return metric
        S.paired_test(probe("a"), probe("b"), t, S.BootstrapConfig(30, seed=5))
        assert seen["a"] == seen["b"]


class TestFdr:
    def test_hand_example(self):
        assert S.bh_fdr([0.01, 0.04, 0.03, 0.005]) == pytest.approx([0.02, 0.04, 0.04, 0.02], abs=1e-15)

    def test_all_ones_and_single(self):
        assert S.bh_fdr([1, 1, 1]).tolist() == [1, 1, 1]
        assert S.bh_fdr([0.3]).tolist() == [0.3]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    def test_properties(self, ps):
        adj = S.bh_fdr(ps)
        p = np.array(ps)
        assert np.all(adj >= p - 1e-15)
        assert np.all(adj <= 1)
        order = np.argsort(p, kind="stable")
        assert np.all(np.diff(adj[order]) >= 0)  # ranking preserved

    @given(c=st.floats(0, 1), m=st.integers(1, 30))
    def test_constant_vectors_are_fixed_points(self, c, m):
        assert S.bh_fdr([c] * m) == pytest.approx([c] * m, rel=1e-15)

    def test_second_pass_can_move_values(self):
        once = S.bh_fdr([0.02, 0.02, 0.04, 0.04])
        assert S.bh_fdr(once) == pytest.approx([0.04] * 4)

    def test_rejects_out_of_range(self):
        with pytest.raises(ParameterError):
            S.bh_fdr([0.2, 1.5])


class TestFormatP:
    @pytest.mark.parametrize("p,text", [
        (0.0005, "P < 0.001"), (0.034, "P = 0.034"), (0.24, "P = 0.24"),
        (0.0012, "P = 0.0012"), (0.19, "P = 0.19"), (0.001, "P = 0.0010"),
        (0.1, "P = 0.10"), (1.0, "P = 1.0"), (0.0, "P < 0.001"), (0.55, "P = 0.55")])
    def test_display(self, p, text):
        assert S.format_p(p) == text

    def test_range(self):
        with pytest.raises(ParameterError):
            S.format_p(1.2)
