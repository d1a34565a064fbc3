import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hospmrp.cells import ALL_CELLS
from hospmrp.metrics import (
    InsufficientOverlap,
    MetricSeries,
    centered_moving_average,
    lead_lag,
    load_metric_series,
    peak_week,
    posterior_predictive_check,
    sensitivity_sweep,
    sweep_calibration,
    sweep_ratio,
    trend_agreement,
    write_metric_series,
)
from hospmrp.model import CalibrationData, Layout, ParameterDraw, TestRecord
from hospmrp.sampler import PosteriorDraws, SamplerConfig
from hospmrp.synthgen import counts_to_records, default_poststrat

from conftest import small_counts

WEEKS = tuple(range(18, 61))


def series(values, name="s", start=18):
    return MetricSeries(name, tuple(range(start, start + len(values))), values)


# -- peaks ---------------------------------------------------------------------


def test_peak_of_monotone_series_is_last_week():
    assert peak_week(series(np.arange(43.0))) == 60


def test_peak_of_symmetric_triangle():
    v = 20.0 - np.abs(np.arange(18, 61) - 45.0)
    assert peak_week(series(v)) == 45


def test_peak_tie_goes_to_earliest():
    v = np.zeros(43)
    v[43 - 18:48 - 18] = [5.0, 1.0, 2.0, 1.0, 5.0]
    sm = centered_moving_average(v)
    assert sm.max() == sm[44 - 18] > sm[45 - 18]
    assert sm[44 - 18] == sm[46 - 18]
    assert peak_week(series(v)) == 44


def test_moving_average_skips_missing():
    assert centered_moving_average([1.0, np.nan, 3.0]).tolist() == [1.0, 2.0, 3.0]


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=5, max_size=50),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_peak_invariant_under_positive_affine_map(v, a, b):
    v = np.array(v)
    sm = np.sort(centered_moving_average(v))
    assume(sm[-1] - sm[-2] > 1e-6 * max(1.0, abs(sm[-1])))
    assert peak_week(series(v)) == peak_week(series(a * v + b))


# -- lead-lag ------------------------------------------------------------------


def test_shift_by_one_week():
    rng = np.random.default_rng(0)
    a = np.cumsum(rng.normal(size=44))
    res = lead_lag(series(a[1:], "a"), series(a[:-1], "b"))
    assert res.best_lag == 1 and res.best_correlation == pytest.approx(1.0)


def test_identical_series_lag_zero():
    a = np.cumsum(np.random.default_rng(1).normal(size=43))
    assert lead_lag(series(a), series(a)).best_lag == 0


def test_independent_noise_rarely_correlates():
    rng = np.random.default_rng(2)
    small = 0
    for _ in range(100):
        res = lead_lag(series(rng.normal(size=43)), series(rng.normal(size=43)))
        small += abs(res.best_correlation) < 0.5
    assert small >= 90


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_lead_lag_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = series(rng.normal(size=30)), series(rng.normal(size=30))
    ab, ba = lead_lag(a, b), lead_lag(b, a)
    c = np.sort(ab.correlations)
    assume(c[-1] - c[-2] > 1e-9)
    assert ab.best_lag == -ba.best_lag


def test_lead_lag_needs_overlap():
    with pytest.raises(InsufficientOverlap, match="at least 8"):
        lead_lag(series(np.arange(8.0)), series(np.arange(8.0)))


def test_metric_csv_roundtrip(tmp_path):
    s = [series([1.0, np.nan, 3.5], "hosp"), series([2.0, 4.0], "ed", start=20)]
    back = load_metric_series(write_metric_series(s, tmp_path / "m.csv"))
    assert [b.name for b in back] == ["hosp", "ed"]
    assert np.isnan(back[0].values[1]) and back[1].weeks == (20, 21)


def test_metric_csv_rejects_duplicate_week(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("week,name,value\n18,a,1\n18,a,2\n")
    with pytest.raises(ValueError, match="row 3.*duplicate week"):
        load_metric_series(p)


# -- posterior predictive check ------------------------------------------------


def _fixed_draws(weeks, beta1, n_draws=400, gamma=0.995, delta=0.8):
    truth = ParameterDraw.zeros(weeks, sigma=0.5, gamma=gamma, delta=delta).replace(beta1=beta1)
    vals = np.tile(truth.to_vector(), (2, n_draws // 2, 1))
    return PosteriorDraws(vals, Layout(weeks).names, Layout(weeks))


def test_ppc_zero_draws_rejected():
    empty = PosteriorDraws(np.zeros((2, 0, Layout([18]).size)), Layout([18]).names, Layout([18]))
    with pytest.raises(ValueError, match="at least one draw"):
        posterior_predictive_check(empty, [])


def test_ppc_flags_empty_week():
    draws = _fixed_draws(range(18, 21), -3.0)
    recs = [TestRecord(18, ALL_CELLS[0], 0)] * 50 + [TestRecord(20, ALL_CELLS[3], 1)] * 2
    check = posterior_predictive_check(draws, recs, seed=0)
    assert check.missing.tolist() == [False, True, False]
    assert np.isnan(check.lower[1]) and not check.covered[1]
    assert check.tests.tolist() == [50, 0, 2]


def test_ppc_intervals_widen_with_fewer_tests():
    draws = _fixed_draws([18, 19], -2.0, n_draws=2000)
    recs = [TestRecord(18, ALL_CELLS[5], 0)] * 1000 + [TestRecord(19, ALL_CELLS[5], 0)] * 100
    check = posterior_predictive_check(draws, recs, seed=1)
    width = check.upper - check.lower
    assert width[1] >= width[0]


def test_ppc_seed_deterministic(scenario):
    draws = _fixed_draws(scenario.weeks, -5.0, n_draws=20)
    recs = counts_to_records(scenario.counts)
    a = posterior_predictive_check(draws, recs, seed=4)
    b = posterior_predictive_check(draws, recs, seed=4)
    assert np.array_equal(a.lower, b.lower) and np.array_equal(a.upper, b.upper)


# -- sensitivity sweep -----------------------------------------------------------


def test_sweep_calibration_keeps_specificity():
    base = CalibrationData.default()
    cal = sweep_calibration(base, 0.65)
    assert cal.sensitivity_trials == ((65, 100),)
    assert cal.specificity_trials == base.specificity_trials


def test_sweep_rejects_out_of_range():
    with pytest.raises(ValueError, match="outside"):
        sensitivity_sweep(small_counts(), range(18, 22), [default_poststrat("hospital")], [1.3])


def test_perfect_test_sweep_equals_raw_scale_fit():
    from hospmrp.model import HierarchicalModel
    from hospmrp.poststrat import poststratify
    from hospmrp.sampler import sample

    counts = small_counts()
    cfg = SamplerConfig(chains=2, warmup_iterations=100, sampling_iterations=40, seed=3)
    table = default_poststrat("community")
    swept = sensitivity_sweep(counts, range(18, 22), [table], [1.0], config=cfg, fixed_gamma=1.0)
    raw = HierarchicalModel(counts, CalibrationData.default(), range(18, 22),
                            fixed_gamma=1.0, fixed_delta=1.0)
    direct = poststratify(sample(raw, cfg), table)
    assert np.array_equal(swept[1.0][0].mean, direct.mean)


def test_sweep_ratio_and_trend():
    from hospmrp.poststrat import PrevalenceSeries

    d = np.array([[0.01, 0.02, 0.015]])
    a = PrevalenceSeries.from_draws("x", [18, 19, 20], d)
    b = PrevalenceSeries.from_draws("x", [18, 19, 20], 2 * d)
    assert sweep_ratio(b, a) == pytest.approx(2.0)
    assert trend_agreement(a, b) == 1.0
