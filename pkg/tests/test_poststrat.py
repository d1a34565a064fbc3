import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hospmrp.cells import ALL_CELLS, Demographics
from hospmrp.model import CalibrationData, HierarchicalModel, PoststratTable, TestRecord
from hospmrp.poststrat import (
    SERIES_COLUMNS,
    describe,
    poststratify,
    raw_weekly_positivity,
    read_series_csv,
    weighted_prevalence,
    write_series_csv,
)
from hospmrp.sampler import SamplerConfig, sample
from hospmrp.synthgen import default_poststrat

from conftest import small_counts

PROBS = arrays(np.float64, 60, elements=st.floats(0, 1))
COUNTS = arrays(np.int64, 60, elements=st.integers(1, 10_000))


def test_two_cell_weighted_mean():
    assert weighted_prevalence(np.array([0.02, 0.04]), [100, 300]) == pytest.approx(0.035, abs=1e-15)


@given(st.floats(0, 1), COUNTS)
def test_constant_field(c, n):
    assert weighted_prevalence(np.full(60, c), n) == pytest.approx(c, abs=1e-15)


@given(PROBS, COUNTS)
def test_scale_invariance_and_bounds(pi, n):
    a = weighted_prevalence(pi, n)
    assert a == pytest.approx(weighted_prevalence(pi, 2 * n), abs=1e-15)
    assert pi.min() - 1e-15 <= a <= pi.max() + 1e-15


def test_zero_table_rejected():
    with pytest.raises(ValueError):
        weighted_prevalence(np.full(60, 0.1), np.zeros(60))


@pytest.fixture(scope="module")
def short_fit():
    model = HierarchicalModel(small_counts(), CalibrationData.default(), range(18, 22))
    return sample(model, SamplerConfig(chains=2, warmup_iterations=150,
                                       sampling_iterations=50, seed=1))


def test_poststratify_summaries(short_fit):
    table = default_poststrat("community")
    s = poststratify(short_fit, table)
    assert s.weeks == (18, 19, 20, 21)
    assert s.draws.shape == (100, 4)
    for lo, q1, q3, hi, m in zip(s.q025, s.q25, s.q75, s.q975, s.mean):
        assert 0 <= lo <= q1 <= q3 <= hi <= 1
        assert lo <= m <= hi
    # a table concentrated on one cell reproduces that cell's incidence
    from hospmrp.model import incidence_grid

    one = np.zeros(60, dtype=int)
    one[7] = 10
    s1 = poststratify(short_fit, PoststratTable("one", one))
    pi = incidence_grid(short_fit.flat(), short_fit.layout)[:, :, 7]
    assert np.allclose(s1.draws, pi, rtol=1e-12)


def test_series_csv_roundtrip(short_fit, tmp_path):
    series = [poststratify(short_fit, default_poststrat(n)) for n in ("hospital", "community")]
    path = write_series_csv(series, tmp_path / "p.csv")
    assert path.read_text().splitlines()[0] == ",".join(SERIES_COLUMNS)
    back = read_series_csv(path)
    assert [b.population_name for b in back] == ["hospital", "community"]
    assert np.array_equal(back[1].q975, series[1].q975)


def _rec(week, result, sex="female", age="35-64", race="white", county="Lake"):
    return TestRecord(week, Demographics(sex, age, race, county), result)


def test_raw_positivity():
    recs = [_rec(18, 1), _rec(18, 1)] + [_rec(18, 0)] * 98 + [_rec(20, 0)] * 5
    raw = raw_weekly_positivity(recs, range(18, 21))
    assert raw.rate[0] == 0.02
    assert np.isnan(raw.rate[1]) and raw.missing.tolist() == [False, True, False]
    assert raw.positives.sum() == 2 and raw.tests.sum() == 105


def test_raw_totals_match_record_count(scenario):
    raw = raw_weekly_positivity(scenario.counts, scenario.weeks)
    assert raw.tests.sum() == scenario.counts.n.sum() == 30116
    assert raw.positives.sum() == scenario.counts.y.sum()


def test_describe_constructed_female_share():
    recs = [_rec(18, 0, sex="female")] * 59 + [_rec(18, 1, sex="male")] * 41
    d = describe(recs)
    assert round(d.marginals["sex"]["female"]) == 59
    assert d.size == 100 and d.prevalence == pytest.approx(41.0)
    for block in d.marginals.values():
        assert sum(block.values()) == pytest.approx(100.0)


def test_describe_singleton():
    d = describe([_rec(18, 0, sex="male", age="75+", race="other", county="Porter")])
    assert d.marginals["sex"] == {"female": 0.0, "male": 100.0}
    assert d.marginals["age_group"]["75+"] == 100.0
    assert d.marginals["county"]["Porter"] == 100.0


def test_describe_population_tables():
    hosp = describe(default_poststrat("hospital"))
    comm = describe(default_poststrat("community"))
    assert hosp.size == 35838 and comm.size == 654890
    assert hosp.prevalence is None
    assert round(hosp.marginals["sex"]["female"]) == 57
    assert round(comm.marginals["sex"]["female"]) == 51
    assert round(comm.marginals["age_group"]["0-17"]) == 24
    assert "Prevalence(%)\tNA" in hosp.lines()


def test_describe_empty_rejected():
    with pytest.raises(ValueError):
        describe([])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(ALL_CELLS), st.integers(0, 1)), min_size=1, max_size=50))
def test_marginal_blocks_sum_to_100(items):
    d = describe([TestRecord(18, c, r) for c, r in items])
    for block in d.marginals.values():
        assert sum(block.values()) == pytest.approx(100.0)
