import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcox.errors import (
    DimensionMismatch,
    MissingResponseOnLabeled,
    NoEvents,
    NonFiniteCovariate,
    NonPositiveTime,
    ResponsePresentOnUnlabeled,
    SchemaError,
)
from dualcox.survival import (
    StepFunction,
    SurvivalSample,
    TrialDataset,
    kaplan_meier,
    logrank_test,
    read_csv,
    validate_dataset,
    write_csv,
)

from oracles import km_by_product, logrank_by_tables


def _rows():
    return [
        {"id": "a", "time": "1.5", "status": "1", "arm": "1", "response": "1", "x1": "0.2"},
        {"id": "b", "time": "2.0", "status": "0", "arm": "1", "response": "2", "x1": "-1"},
        {"id": "c", "time": "3.0", "status": "1", "arm": "0", "response": "", "x1": "0.0"},
        {"id": "d", "time": "4.0", "status": "1", "arm": "0", "response": "", "x1": "1.1"},
    ]


class TestSurvivalSample:
    def test_valid(self):
        s = SurvivalSample(2.0, 1, (0.1, 0.2), True, 1, "a")
        assert s.arm == "labeled"

    @pytest.mark.parametrize("time", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_time(self, time):
        with pytest.raises(NonPositiveTime):
            SurvivalSample(time, 1, (0.0,), False)

    def test_labeled_without_response(self):
        with pytest.raises(MissingResponseOnLabeled):
            SurvivalSample(1.0, 1, (0.0,), True, None)

    def test_unlabeled_with_response(self):
        with pytest.raises(ResponsePresentOnUnlabeled):
            SurvivalSample(1.0, 1, (0.0,), False, 2)

    def test_nonfinite_covariate(self):
        with pytest.raises(NonFiniteCovariate):
            SurvivalSample(1.0, 1, (float("nan"),), False)


class TestValidateDataset:
    def test_four_rows_two_labeled(self):
        ds = validate_dataset(_rows(), ["x1"])
        assert ds.n == 4
        assert ds.n_labeled == 2
        assert ds.n_unlabeled == 2
        np.testing.assert_array_equal(ds.response, [1, 2, 0, 0])
        assert ds.censoring_rate == pytest.approx(0.25)

    def test_zero_time(self):
        rows = _rows()
        rows[2]["time"] = "0"
        with pytest.raises(NonPositiveTime):
            validate_dataset(rows, ["x1"])

    def test_labeled_missing_response(self):
        rows = _rows()
        rows[0]["response"] = ""
        with pytest.raises(MissingResponseOnLabeled):
            validate_dataset(rows, ["x1"])

    def test_unlabeled_with_response(self):
        rows = _rows()
        rows[3]["response"] = "1"
        with pytest.raises(ResponsePresentOnUnlabeled):
            validate_dataset(rows, ["x1"])

    def test_error_carries_line_number(self):
        rows = _rows()
        rows[1]["x1"] = "inf"
        with pytest.raises(NonFiniteCovariate, match="line 3"):
            validate_dataset(rows, ["x1"], first_line=2)


class TestTrialDataset:
    def test_arrays_are_read_only(self):
        ds = validate_dataset(_rows(), ["x1"])
        with pytest.raises(ValueError):
            ds.times[0] = 5.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            TrialDataset.from_arrays([1, 2, 3], [1, 1], np.zeros((3, 1)), [0, 0, 0])

    def test_subset_and_samples(self):
        ds = validate_dataset(_rows(), ["x1"])
        sub = ds.subset(ds.labeled)
        assert sub.n == 2 and sub.n_unlabeled == 0
        assert [s.id for s in ds.samples] == ["a", "b", "c", "d"]

    def test_tied_event_times(self):
        ds = TrialDataset.from_arrays([1, 1, 2], [1, 1, 0], np.zeros((3, 1)), [0, 0, 0])
        assert ds.has_tied_event_times


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = validate_dataset(_rows(), ["x1"])
        path = tmp_path / "d.csv"
        write_csv(ds, path)
        back = read_csv(path)
        np.testing.assert_array_equal(back.times, ds.times)
        np.testing.assert_array_equal(back.covariates, ds.covariates)
        np.testing.assert_array_equal(back.response, ds.response)
        assert back.ids == ds.ids

    def test_missing_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,time,status,arm,x1\n1,1.0,1,0,0.5\n")
        with pytest.raises(SchemaError):
            read_csv(path)

    def test_short_row_reports_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,time,status,arm,response,x1\n1,1.0,1,0,,0.5\n2,1.0,1\n")
        with pytest.raises(SchemaError, match="line 3"):
            read_csv(path)

    def test_covariate_selection(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,time,status,arm,response,x1,x2\n"
                        "1,1.0,1,1,1,0.5,9\n2,2.0,0,0,,0.1,8\n")
        ds = read_csv(path, covariates=["x2"])
        assert ds.covariate_names == ("x2",)
        np.testing.assert_array_equal(ds.covariates[:, 0], [9, 8])


class TestStepFunction:
    def test_right_continuous(self):
        f = StepFunction([1.0, 2.0], [0.5, 0.25], value_before_first=1.0)
        assert f(0.5) == 1.0
        assert f(1.0) == 0.5
        assert f(1.999) == 0.5
        assert f(2.0) == 0.25
        assert f(10) == 0.25

    def test_jump_at(self):
        f = StepFunction([1.0, 2.0], [0.5, 0.25])
        assert f.jump_at(2.0) == 0.25
        assert f.jump_at(1.5) == 0.0
        np.testing.assert_array_equal(f.jump_at(np.array([0.5, 1.0, 3.0])), [0, 0.5, 0])


class TestKaplanMeier:
    def test_no_censoring_is_empirical(self):
        km = kaplan_meier([1, 2, 3, 4], [1, 1, 1, 1])
        np.testing.assert_allclose(km.values, [0.75, 0.5, 0.25, 0.0])

    def test_censored_middle(self):
        km = kaplan_meier([1, 2, 3], [1, 0, 1])
        assert km(1) == pytest.approx(2 / 3)
        assert km(2.5) == pytest.approx(2 / 3)
        assert km(3) == 0.0

    def test_single_event(self):
        km = kaplan_meier([5], [1])
        assert km(4.99) == 1.0
        assert km(5) == 0.0

    def test_no_events(self):
        with pytest.raises(NoEvents):
            kaplan_meier([1, 2], [0, 0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 15), st.integers(0, 1)), min_size=1, max_size=25)
           .filter(lambda r: any(d for _, d in r)),
           st.randoms(use_true_random=False))
    def test_matches_product_formula_monotone_and_order_free(self, rows, rnd):
        times = [float(t) for t, _ in rows]
        statuses = [d for _, d in rows]
        km = kaplan_meier(times, statuses)
        assert np.all(np.diff(km.values) <= 0)
        assert np.all((km.values >= 0) & (km.values <= 1))
        for t in km.knots:
            assert km(t) == pytest.approx(km_by_product(times, statuses, t), abs=1e-12)
        perm = list(range(len(rows)))
        rnd.shuffle(perm)
        km2 = kaplan_meier([times[i] for i in perm], [statuses[i] for i in perm])
        np.testing.assert_allclose(km2.values, km.values, rtol=0, atol=1e-15)


class TestLogrank:
    def test_identical_groups(self):
        t, s = [1, 2, 3, 4], [1, 0, 1, 1]
        stat, p = logrank_test(t, s, t, s)
        assert stat == 0.0
        assert p == 1.0

    def test_two_per_group_hand_tables(self):
        # O - E = 1/2 + 2/3 and V = 1/4 + 2/9 from the tables at t = 1 and t = 2
        stat, p = logrank_test([1, 2], [1, 1], [10, 20], [1, 1])
        assert stat == pytest.approx(49 / 17, rel=1e-12)
        assert stat == pytest.approx(logrank_by_tables([1, 2], [1, 1], [10, 20], [1, 1]))
        assert p == pytest.approx(0.0895550744, rel=1e-8)

    def test_separated_groups_significant(self):
        stat, p = logrank_test([1, 2, 3], [1, 1, 1], [10, 20, 30], [1, 1, 1])
        assert p < 0.05

    def test_all_censored_group(self):
        with pytest.raises(NoEvents):
            logrank_test([1, 2], [1, 1], [3, 4], [0, 0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 12), st.integers(0, 1)), min_size=2, max_size=15)
           .filter(lambda r: any(d for _, d in r)),
           st.lists(st.tuples(st.integers(1, 12), st.integers(0, 1)), min_size=2, max_size=15)
           .filter(lambda r: any(d for _, d in r)))
    def test_symmetric_and_matches_tables(self, a, b):
        ta, sa = [float(t) for t, _ in a], [d for _, d in a]
        tb, sb = [float(t) for t, _ in b], [d for _, d in b]
        s1, p1 = logrank_test(ta, sa, tb, sb)
        s2, p2 = logrank_test(tb, sb, ta, sa)
        assert s1 == pytest.approx(s2, rel=1e-9, abs=1e-12)
        assert p1 == pytest.approx(p2, rel=1e-9, abs=1e-12)
        assert 0.0 <= p1 <= 1.0
        oracle = logrank_by_tables(ta, sa, tb, sb) if s1 > 0 else 0.0
        assert s1 == pytest.approx(oracle, rel=1e-9, abs=1e-10)
