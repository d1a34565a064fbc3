import numpy as np
import pytest

from hospmrp.diagnostics import effective_sample_size, split_rhat, summarize


def test_rhat_near_one_for_iid_chains():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 1000))
    assert 0.99 <= split_rhat(x) <= 1.02


def test_rhat_flags_offset_chain():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 1000))
    x[0] += 10.0
    assert split_rhat(x) > 1.5


def test_rhat_flags_drift_within_chains():
    # split chains catch a trend that whole-chain R-hat would miss
    x = np.tile(np.linspace(-3, 3, 500), (4, 1))
    assert split_rhat(x) > 1.5


def test_ess_of_iid_draws_is_close_to_draw_count():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 1000))
    assert 3000 < effective_sample_size(x) < 5000


def test_ess_drops_under_autocorrelation():
    rng = np.random.default_rng(3)
    e = rng.normal(size=(4, 2000))
    x = np.empty_like(e)
    x[:, 0] = e[:, 0]
    for t in range(1, e.shape[1]):
        x[:, t] = 0.9 * x[:, t - 1] + e[:, t]
    # AR(1) with phi = 0.9: ESS ~ N (1 - phi) / (1 + phi)
    ess = effective_sample_size(x)
    assert 0.5 * 8000 / 19 < ess < 2.0 * 8000 / 19


def test_constant_parameter_is_flagged_not_fatal():
    x = np.zeros((4, 100, 2))
    x[..., 1] = np.random.default_rng(4).normal(size=(4, 100))
    out = summarize(x, ["const", "noise"])
    assert out["const"].degenerate
    assert np.isnan(out["const"].rhat) and np.isnan(out["const"].ess)
    assert not out["noise"].degenerate


def test_single_chain_rejected():
    with pytest.raises(ValueError, match="at least 2 chains"):
        split_rhat(np.zeros((1, 100)) + np.arange(100))
