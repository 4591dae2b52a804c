import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcox.errors import EmptyInput, EmptyRiskSet, EmptySurvivorSet
from dualcox.metrics import (
    auc_over_times,
    bias_stats,
    classification_accuracy,
    dynamic_specificity,
    incident_sensitivity,
    roc_at_time,
    roc_curves_csv,
    subgroup_auc,
)
from dualcox.simulation import SimConfig, generate_dataset


class TestAccuracy:
    def test_counts(self):
        assert classification_accuracy([1, 2, 1], [1, 2, 1]) == 1.0
        assert classification_accuracy([1, 1], [2, 2]) == 0.0
        assert classification_accuracy([1] * 7 + [2] * 3, [1] * 10) == pytest.approx(0.7)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            classification_accuracy([], [])


class TestBiasStats:
    def test_constant(self):
        mean, sd, bias, rel = bias_stats([1, 1, 1], 1.0)
        assert (mean, sd, bias, rel) == (1.0, 0.0, 0.0, 0.0)

    def test_pair(self):
        mean, sd, bias, _ = bias_stats([0.9, 1.1], 1.0)
        assert mean == pytest.approx(1.0)
        assert sd == pytest.approx(math.sqrt(0.02), rel=1e-12)
        assert bias == pytest.approx(0.0, abs=1e-15)

    def test_zero_truth(self):
        assert bias_stats([0.1, -0.1], 0.0)[3] is None

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(-50, 50))
    def test_shift_equivariance(self, est, shift):
        m1, s1, b1, _ = bias_stats(est, 1.0)
        m2, s2, b2, _ = bias_stats(np.asarray(est) + shift, 1.0 + shift)
        assert m2 == pytest.approx(m1 + shift, abs=1e-9)
        assert s2 == pytest.approx(s1, abs=1e-9)
        assert b2 == pytest.approx(b1, abs=1e-9)


class TestIncidentSensitivity:
    def test_extremes(self):
        m = np.array([0.0, 1.0, 2.0])
        t = np.array([1.0, 2.0, 3.0])
        assert incident_sensitivity(-1.0, 1.0, m, t, m) == 1.0
        assert incident_sensitivity(5.0, 1.0, m, t, m) == 0.0

    def test_hand_value(self):
        m = np.array([0.0, 1.0, 2.0])
        val = incident_sensitivity(0.5, 1.0, m, np.array([1.0, 2.0, 3.0]), m)
        expected = (math.e + math.e ** 2) / (1 + math.e + math.e ** 2)
        assert expected == pytest.approx(0.9100, abs=5e-5)
        assert val == pytest.approx(expected, rel=1e-14)

    def test_empty_risk_set(self):
        with pytest.raises(EmptyRiskSet):
            incident_sensitivity(0.0, 10.0, [1.0], [1.0], [0.0])


class TestDynamicSpecificity:
    def test_extremes(self):
        m = np.array([1.0, 2.0, 3.0, 4.0])
        t = np.array([5.0, 6.0, 7.0, 8.0])
        assert dynamic_specificity(10.0, 1.0, m, t) == 1.0
        assert dynamic_specificity(0.0, 1.0, m, t) == 0.0

    def test_counting(self):
        m = np.array([1.0, 2.0, 3.0, 4.0])
        assert dynamic_specificity(2.5, 1.0, m, np.array([5.0, 6.0, 7.0, 8.0])) == 0.5

    def test_empty_survivor_set(self):
        with pytest.raises(EmptySurvivorSet):
            dynamic_specificity(0.0, 3.0, [1.0, 2.0], [2.0, 3.0])


class TestRoc:
    def test_constant_marker(self):
        times = np.array([1.0, 2.0, 3.0, 4.0])
        cur = roc_at_time(1.5, times, np.zeros(4))
        assert cur.sensitivity.tolist() == [0.0, 1.0]
        assert cur.one_minus_specificity.tolist() == [0.0, 1.0]
        assert cur.auc == pytest.approx(0.5)

    def test_separating_marker(self):
        # risk set at t = 1 is everyone; heavy weight on the largest markers
        times = np.arange(1.0, 21.0)
        lp = np.linspace(30.0, 0.0, 20)
        cur = roc_at_time(1.0, times, lp)
        assert cur.auc > 0.99

    def test_five_subject_hand_curve(self):
        times = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        lp = np.array([0.5, 1.2, -0.3, 0.8, 0.0])
        cur = roc_at_time(2.0, times, lp)
        # risk set at t = 2: subjects 2..5; survivors past 2: subjects 3..5
        risk = [1, 2, 3, 4]
        surv = [2, 3, 4]
        thresholds = [1.2, 0.8, 0.0, -0.3, -math.inf]
        np.testing.assert_array_equal(cur.thresholds, thresholds)
        for k, c in enumerate(thresholds):
            num = sum(math.exp(lp[i]) for i in risk if lp[i] > c)
            se = num / sum(math.exp(lp[i]) for i in risk)
            fp = sum(1 for i in surv if lp[i] > c) / len(surv)
            assert cur.sensitivity[k] == pytest.approx(se, rel=1e-14, abs=1e-15)
            assert cur.one_minus_specificity[k] == pytest.approx(fp, abs=1e-15)
            assert cur.sensitivity[k] == pytest.approx(
                incident_sensitivity(c, 2.0, lp, times, lp), abs=1e-15)
            assert 1 - cur.one_minus_specificity[k] == pytest.approx(
                dynamic_specificity(c, 2.0, lp, times), abs=1e-15)
        x, y = cur.one_minus_specificity, cur.sensitivity
        assert cur.auc == pytest.approx(float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_curve_monotone_in_unit_square(self, seed):
        rng = np.random.default_rng(seed)
        times = rng.exponential(1.0, 30)
        lp = rng.normal(size=30)
        cur = roc_at_time(float(np.median(times)), times, lp)
        assert np.all(np.diff(cur.sensitivity) >= -1e-15)
        assert np.all(np.diff(cur.one_minus_specificity) >= 0)
        assert (cur.sensitivity[0], cur.one_minus_specificity[0]) == (0.0, 0.0)
        assert (cur.sensitivity[-1], cur.one_minus_specificity[-1]) == (1.0, 1.0)
        assert 0.0 <= cur.auc <= 1.0


class TestAucOverTimes:
    def test_single_point(self):
        times = np.array([1.0, 2.0, 3.0, 4.0])
        lp = np.array([0.3, 0.1, -0.2, 0.0])
        curves, omitted = auc_over_times([2.0], times, lp)
        assert len(curves) == 1 and not omitted
        assert curves[0].auc == roc_at_time(2.0, times, lp).auc

    def test_past_last_time_omitted(self):
        curves, omitted = auc_over_times([1.5, 10.0], np.array([1.0, 2.0, 3.0]),
                                         np.array([0.0, 1.0, 2.0]))
        assert [c.t for c in curves] == [1.5]
        assert omitted == [10.0]

    def test_csv_rows(self):
        curves, _ = auc_over_times([1.5], np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, 2.0]))
        lines = roc_curves_csv(curves, "overall").splitlines()
        assert lines[0] == "group,t,c,sensitivity,one_minus_specificity"
        assert len(lines) == 1 + len(curves[0].thresholds)

    def test_per_component_beats_pooled_early(self):
        sim = generate_dataset(SimConfig(n=600), 5)
        res = subgroup_auc(sim.dataset, sim.true_labels, [2.0])
        pooled = res["overall"][0][0].auc
        assert res["responders"][0][0].auc > pooled
        assert res["non_responders"][0][0].auc > pooled
