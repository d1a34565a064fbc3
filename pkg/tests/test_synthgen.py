import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logit
from scipy.stats import beta as beta_dist

from hospmrp.model import CalibrationData, ParameterDraw
from hospmrp.poststrat import describe
from hospmrp.synthgen import (
    STUDY_WEEKS,
    WEEKLY_SAMPLE,
    ConjugateNormal,
    default_design,
    default_poststrat,
    default_truth,
    generate,
    generate_counts,
    grid_oracle,
    integerize,
    true_prevalence,
)


def test_weekly_volumes_match_study_totals():
    assert list(STUDY_WEEKS) == list(range(18, 61))
    assert sum(row[0] for row in WEEKLY_SAMPLE.values()) == 30116
    assert WEEKLY_SAMPLE[18][:3] == (95, 47, 48)
    for row in WEEKLY_SAMPLE.values():
        assert row[1] + row[2] == row[0]
        assert sum(row[3:8]) == row[0] == sum(row[8:11])
    design = default_design(seed=1)
    assert design.shape == (43, 60)
    assert design.sum(axis=1).tolist() == [WEEKLY_SAMPLE[w][0] for w in STUDY_WEEKS]


def test_population_tables_match_published_marginals():
    hosp, comm = default_poststrat("hospital"), default_poststrat("community")
    assert (hosp.total, comm.total) == (35838, 654890)
    for table, female, age in ((hosp, 57, (9, 12, 30, 20, 29)), (comm, 51, (24, 21, 40, 9, 6))):
        d = describe(table)
        assert round(d.marginals["sex"]["female"]) == female
        assert tuple(round(v) for v in d.marginals["age_group"].values()) == age


@given(arrays(np.float64, st.integers(1, 80), elements=st.floats(0.01, 100)), st.integers(0, 10**6))
def test_integerize_hits_total(x, total):
    out = integerize(x, total)
    assert out.sum() == total and (out >= 0).all()
    assert np.all(np.abs(out - x * total / x.sum()) < 1.0)


def test_zero_prevalence_gives_no_positives():
    truth = ParameterDraw.zeros(range(18, 21), gamma=1.0, delta=1.0).replace(beta1=-30.0)
    counts = generate_counts(truth, np.full((3, 60), 100), seed=0)
    assert counts.y.sum() == 0 and counts.n.sum() == 18000


def test_large_cell_positive_fraction():
    truth = ParameterDraw.zeros([18], gamma=0.99, delta=0.7).replace(beta1=float(logit(0.01)))
    counts = generate_counts(truth, {(18, 0): 10**6}, seed=3)
    assert len(counts) == 1
    assert abs(counts.y[0] / 10**6 - 0.0169) < 0.001


def test_generation_is_seed_deterministic():
    truth = default_truth()
    design = default_design(0)
    assert generate(truth, design, 5) == generate(truth, design, 5)
    assert generate(truth, design, 5) != generate(truth, design, 6)
    assert len(generate(truth, design, 5)) == 30116


def test_default_truth_shape():
    truth = default_truth()
    assert truth.weeks == STUDY_WEEKS
    assert abs(truth.alpha_time.mean()) < 1e-12
    peak = STUDY_WEEKS[int(np.argmax(truth.alpha_time))]
    assert peak == 46
    prev = true_prevalence(truth, default_poststrat("community"))
    assert 0.003 < prev.min() < prev.max() < 0.1


# -- grid oracle ---------------------------------------------------------------


def test_grid_matches_conjugate_normal():
    rng = np.random.default_rng(0)
    target = ConjugateNormal(rng.normal(2.0, 1.5, 12), noise_sd=1.5, prior_mean=-1.0, prior_sd=2.0)
    g = grid_oracle(target.log_density, [0.0], [1.0])
    assert abs(g.mean[0] - target.posterior_mean) < 1e-4
    assert abs(g.sd[0] - target.posterior_sd) < 1e-4


def test_conjugate_gradient():
    target = ConjugateNormal([0.5, 1.0, 3.0], noise_sd=0.7, prior_sd=3.0)
    x = np.array([0.3])
    _, g = target.log_density_and_gradient(x)
    fd = (target.log_density(x + 1e-6) - target.log_density(x - 1e-6)) / 2e-6
    assert g[0] == pytest.approx(float(fd[0]), rel=1e-7)


def test_grid_matches_beta_posterior_for_specificity():
    ys, ns, _, _ = CalibrationData.default().totals()

    def logp(g):
        return ys * np.log(g) + (ns - ys) * np.log1p(-g)

    g = grid_oracle(logp, [0.995], [0.01])
    post = beta_dist(1 + ys, 1 + ns - ys)
    assert abs(g.mean[0] - post.mean()) < 1e-4
    assert abs(g.sd[0] - post.std()) < 1e-4


def test_grid_symmetric_density_centred():
    g = grid_oracle(lambda x: -np.abs(x - 1.25) ** 3, [0.0], [3.0])
    assert g.mean[0] == pytest.approx(1.25, abs=1e-10)


def test_grid_two_dimensional():
    def logp(x, y):
        return -0.5 * ((x - 1.0) / 0.5) ** 2 - 0.5 * ((y + 2.0) / 2.0) ** 2

    g = grid_oracle(logp, [0.0, 0.0], [1.0, 1.0], points=2001)
    assert np.allclose(g.mean, [1.0, -2.0], atol=1e-6)
    assert np.allclose(g.sd, [0.5, 2.0], atol=1e-4)


def test_grid_requires_enough_points():
    with pytest.raises(ValueError, match="2000"):
        grid_oracle(lambda x: -x * x, [0.0], [1.0], points=100)
