import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptcox.evaluation import (
    bootstrap_c_index,
    bootstrap_ci,
    c_index,
    calibration_slope,
    d_calibration,
    evaluate_predictions,
    kaplan_meier,
    one_calibration,
    risk_strata,
)
from conceptcox.synthcohort import generate_cox_data

from oracles import c_index_pairs, km_brute

survival_arrays = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(1, 10), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
        st.lists(st.integers(-5, 5), min_size=n, max_size=n),
    )
)


def has_pairs(time, event):
    time, event = np.asarray(time), np.asarray(event)
    return any(event[i] and np.any(time > time[i]) for i in range(time.size))


class TestCIndex:
    def test_against_pair_enumeration(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            time = rng.integers(1, 60, 200).astype(float)
            event = (rng.random(200) < 0.6).astype(int)
            risk = np.round(rng.normal(size=200), 1)
            assert c_index(time, event, risk) == pytest.approx(c_index_pairs(time, event, risk), abs=1e-12)

    def test_fenwick_path_matches_enumeration(self):
        rng = np.random.default_rng(1)
        n = 2500
        time = rng.integers(1, 400, n).astype(float)
        event = (rng.random(n) < 0.5).astype(int)
        risk = np.round(rng.normal(size=n), 2)
        assert c_index(time, event, risk) == pytest.approx(c_index_pairs(time, event, risk), abs=1e-12)

    def test_examples(self):
        t = [1, 2, 3, 4]
        e = [1, 1, 1, 1]
        assert c_index(t, e, [4, 3, 2, 1]) == 1.0
        assert c_index(t, e, [1, 2, 3, 4]) == 0.0
        assert c_index(t, e, [0, 0, 0, 0]) == 0.5

    def test_censored_first_is_not_comparable(self):
        # only pair (1, 2) with subject 1 dying first counts
        assert c_index([1, 2, 3], [0, 1, 0], [0, 5, 1]) == 1.0

    def test_no_pairs(self):
        with pytest.raises(ValueError):
            c_index([1, 2], [0, 0], [1, 2])

    @settings(max_examples=80, deadline=None)
    @given(survival_arrays)
    def test_properties(self, arrays):
        time, event, risk = (np.asarray(a, float) for a in arrays)
        if not has_pairs(time, event):
            return
        c = c_index(time, event, risk)
        assert 0.0 <= c <= 1.0
        assert c_index(time, event, -risk) == pytest.approx(1.0 - c)
        assert c_index(time, event, np.exp(risk) * 3 + 1) == pytest.approx(c)


class TestBootstrap:
    def test_fast_path_matches_generic(self):
        X, time, event = generate_cox_data(300, [1.0], 0.3, seed=0)
        risk = X[:, 0]
        fast = bootstrap_c_index(time, event, risk, B=200, seed=5)
        slow = bootstrap_ci(c_index, (time, event, risk), B=200, seed=5)
        assert fast.median == pytest.approx(slow.median, abs=1e-12)
        assert fast.lo == pytest.approx(slow.lo, abs=1e-12)
        assert fast.hi == pytest.approx(slow.hi, abs=1e-12)

    def test_deterministic_and_ordered(self):
        X, time, event = generate_cox_data(300, [1.0], 0.3, seed=0)
        a = bootstrap_c_index(time, event, X[:, 0], B=100, seed=3)
        assert a == bootstrap_c_index(time, event, X[:, 0], B=100, seed=3)
        assert a.lo <= a.median <= a.hi

    def test_dropped_replicates_counted(self):
        # one event: many replicates have no comparable pair
        time = np.arange(1.0, 6.0)
        event = np.array([1, 0, 0, 0, 0])
        ci = bootstrap_c_index(time, event, -time, B=200, seed=0)
        assert 0 < ci.n_dropped < 200
        assert ci.median == 1.0


class TestKaplanMeier:
    def test_hand_example(self):
        km = kaplan_meier([1, 2, 3], [1, 0, 1])
        assert km(0.5) == 1.0
        assert km(1) == pytest.approx(2 / 3)
        assert km(2.5) == pytest.approx(2 / 3)
        assert km(3) == 0.0

    def test_against_definition(self):
        rng = np.random.default_rng(0)
        time = rng.integers(1, 20, 80).astype(float)
        event = (rng.random(80) < 0.7).astype(int)
        km = kaplan_meier(time, event)
        for t in np.arange(0, 22, 0.5):
            assert km(t) == pytest.approx(km_brute(time, event, t), abs=1e-12)

    def test_rows(self):
        rows = kaplan_meier([1, 2, 3], [1, 0, 1]).to_rows()
        assert rows[0] == {"time": 0.0, "survival": 1.0, "at_risk": 3, "events": 0, "censored": 0}
        assert rows[-1]["at_risk"] == 1 and rows[-1]["censored"] == 1

    @settings(max_examples=60, deadline=None)
    @given(survival_arrays)
    def test_monotone_nonincreasing(self, arrays):
        time, event, _ = arrays
        km = kaplan_meier(time, event)
        assert np.all(np.diff(km.values) <= 0)
        assert np.all((km.values >= 0) & (km.values <= 1))


class TestStrata:
    def test_sizes(self):
        labels = risk_strata(np.arange(100.0))
        assert (labels == "high").sum() == 10
        assert (labels == "medium").sum() == 15
        assert (labels == "low").sum() == 75
        assert set(np.flatnonzero(labels == "high")) == set(range(90, 100))

    def test_small_n_rounds_up(self):
        labels = risk_strata(np.arange(7.0))
        assert [(labels == g).sum() for g in ("high", "medium", "low")] == [1, 1, 5]

    def test_ties_by_row_index(self):
        labels = risk_strata(np.zeros(10))
        assert labels[0] == "high" and labels[1] == "medium" and labels[2] == "medium"


class TestOneCalibration:
    def test_all_events_before_horizon(self):
        bins = one_calibration(np.full(20, 0.9), np.arange(1, 21), np.ones(20), t=30, n_bins=2)
        np.testing.assert_allclose(bins.observed, [1.0, 1.0])
        assert bins.max_gap() == pytest.approx(0.1)

    def test_undefined_bin_is_nan(self):
        p = np.r_[np.zeros(5), np.ones(5)]
        time = np.r_[np.full(5, 2.0), np.full(5, 1.0)]
        event = np.r_[np.zeros(5), np.ones(5)]
        bins = one_calibration(p, time, event, t=10, n_bins=2)
        assert np.isnan(bins.observed[0]) and bins.observed[1] == 1.0
        assert bins.to_rows()[0]["observed"] is None

    def test_rejects_bad_probabilities(self):
        with pytest.raises(ValueError):
            one_calibration([1.5], [1.0], [1])

    def test_generating_model_is_calibrated(self):
        X, time, event = generate_cox_data(10_000, [1.0, -0.5], 0.3, seed=0)
        horizon = float(np.median(time))
        pred = 1 - np.exp(-horizon * np.exp(X @ [1.0, -0.5]))
        bins = one_calibration(pred, time, event, t=horizon)
        assert bins.count.sum() == 10_000
        assert bins.max_gap() < 0.03
        assert calibration_slope(bins) == pytest.approx(1.0, abs=0.1)


class TestDCalibration:
    def test_events_uniform_grid(self):
        s = (np.arange(100) + 0.5) / 100
        bins = d_calibration(s, np.ones(100))
        np.testing.assert_allclose(bins.observed, 0.1)

    def test_censored_mass_split(self):
        # S(C)=0.25 spreads 0.4 into [0,.1), 0.4 into [.1,.2), 0.2 into [.2,.25)
        bins = d_calibration([0.25], [0], n_bins=10)
        np.testing.assert_allclose(bins.observed, [0.4, 0.4, 0.2] + [0.0] * 7, atol=1e-12)

    def test_censored_at_one_is_uniform(self):
        bins = d_calibration([1.0], [0], n_bins=5)
        np.testing.assert_allclose(bins.observed, 0.2)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60),
        st.integers(1, 20),
    )
    def test_masses_sum_to_one(self, rows, n_bins):
        s, e = zip(*rows)
        bins = d_calibration(s, e, n_bins=n_bins)
        assert abs(bins.observed.sum() - 1.0) < 1e-9
        assert np.all(bins.observed >= -1e-15)

    def test_generating_model_is_flat(self):
        X, time, event = generate_cox_data(10_000, [1.0, -0.5], 0.3, seed=1)
        s = np.exp(-time * np.exp(X @ [1.0, -0.5]))
        bins = d_calibration(s, event)
        assert abs(bins.observed.sum() - 1) < 1e-9
        assert np.all(np.abs(bins.observed - 0.1) <= 0.03)


def test_evaluate_predictions_bundle():
    X, time, event = generate_cox_data(500, [1.0], 0.3, seed=2)
    risk = X[:, 0]
    h = float(np.median(time))
    rep = evaluate_predictions(
        time,
        event,
        risk,
        1 - np.exp(-h * np.exp(risk)),
        np.exp(-time * np.exp(risk)),
        subgroups={"left": X[:, 0] < 0, "empty": np.zeros(500, bool)},
        horizon=h,
        n_boot=50,
    )
    d = rep.to_dict()
    assert d["c_index"] == pytest.approx(c_index(time, event, risk))
    assert d["c_index_lo"] <= d["c_index_median"] <= d["c_index_hi"]
    assert d["subgroup_c_index"]["empty"] is None
    assert d["strata_sizes"] == {"high": 50, "medium": 75, "low": 375}
    assert len(d["one_calibration"]) == 10 and len(d["d_calibration"]) == 10
    assert rep.km_curves["high"](h) < rep.km_curves["low"](h)
