"""Synthetic data with known ground truth, and grid-quadrature oracles.

The bundled scenario mimics the hospital study's scale: the weekly test
volumes and sex/age/race mix of the asymptomatic pre-procedure cohort for
weeks 18-60, a county split of 84/16 (Lake/Porter), and a true incidence
near 0.5% with an autumn wave peaking in mid-November.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from .cells import (
    AGE_LEVELS,
    ALL_CELLS,
    CELL_AGE,
    CELL_COUNTY,
    CELL_RACE,
    CELL_SEX,
    COUNTY_LEVELS,
    N_CELLS,
    RACE_LEVELS,
    SEX_LEVELS,
)
from .model import (
    CellWeekCounts,
    ParameterDraw,
    PoststratTable,
    TestRecord,
    analytic_incidence,
    cell_effects,
)

STUDY_WEEKS = range(18, 61)

# Weekly asymptomatic sample: total, male, female, age (5 groups), race (white, black, other).
WEEKLY_SAMPLE = {
    18: (95, 47, 48, 1, 12, 42, 26, 14, 65, 16, 14),
    19: (376, 173, 203, 17, 40, 176, 91, 52, 274, 55, 47),
    20: (582, 242, 340, 26, 73, 257, 123, 103, 403, 83, 96),
    21: (569, 216, 353, 26, 81, 246, 130, 86, 415, 73, 81),
    22: (419, 164, 255, 16, 53, 171, 105, 74, 302, 66, 51),
    23: (616, 244, 372, 26, 75, 259, 150, 106, 451, 95, 70),
    24: (640, 271, 369, 24, 46, 304, 155, 111, 476, 81, 83),
    25: (651, 270, 381, 26, 66, 292, 166, 101, 476, 79, 96),
    26: (627, 288, 339, 24, 66, 270, 151, 116, 457, 86, 84),
    27: (324, 136, 188, 9, 39, 141, 62, 73, 249, 37, 38),
    28: (1070, 435, 635, 46, 114, 466, 248, 196, 793, 148, 129),
    29: (668, 273, 395, 17, 66, 306, 173, 106, 471, 94, 103),
    30: (635, 266, 369, 17, 70, 279, 145, 124, 472, 74, 89),
    31: (711, 292, 419, 29, 72, 326, 149, 135, 490, 103, 118),
    32: (665, 267, 398, 20, 81, 287, 163, 114, 487, 86, 92),
    33: (750, 312, 438, 18, 101, 321, 185, 125, 527, 115, 108),
    34: (678, 262, 416, 10, 85, 330, 157, 96, 477, 91, 110),
    35: (700, 266, 434, 17, 74, 313, 171, 125, 494, 96, 110),
    36: (420, 163, 257, 13, 60, 181, 92, 74, 293, 56, 71),
    37: (1021, 380, 641, 35, 111, 444, 232, 199, 721, 155, 145),
    38: (815, 325, 490, 23, 60, 389, 205, 138, 583, 129, 103),
    39: (742, 324, 418, 19, 67, 350, 170, 136, 548, 103, 91),
    40: (792, 316, 476, 19, 75, 364, 210, 124, 573, 111, 108),
    41: (817, 307, 510, 18, 73, 378, 189, 159, 599, 113, 105),
    42: (883, 341, 542, 23, 94, 416, 203, 147, 639, 126, 118),
    43: (843, 348, 495, 32, 82, 389, 189, 151, 583, 131, 129),
    44: (816, 341, 475, 18, 84, 381, 202, 131, 592, 114, 110),
    45: (839, 337, 502, 28, 74, 399, 206, 132, 598, 117, 124),
    46: (778, 315, 463, 23, 69, 368, 182, 136, 562, 107, 109),
    47: (712, 294, 418, 15, 77, 352, 149, 119, 507, 104, 101),
    48: (658, 278, 380, 10, 70, 298, 167, 113, 495, 81, 82),
    49: (975, 406, 569, 24, 97, 482, 232, 140, 719, 128, 128),
    50: (930, 385, 545, 36, 109, 427, 223, 135, 678, 118, 134),
    51: (720, 297, 423, 23, 79, 345, 174, 99, 513, 107, 100),
    52: (569, 218, 351, 13, 68, 292, 129, 67, 427, 60, 82),
    53: (62, 16, 46, 2, 14, 31, 9, 6, 42, 14, 6),
    54: (763, 308, 455, 9, 86, 364, 175, 129, 553, 114, 96),
    55: (833, 346, 487, 21, 97, 371, 188, 156, 595, 122, 116),
    56: (904, 387, 517, 21, 77, 431, 220, 155, 662, 122, 120),
    57: (911, 389, 522, 15, 72, 441, 244, 139, 636, 154, 121),
    58: (816, 329, 487, 25, 59, 404, 205, 123, 584, 119, 113),
    59: (929, 399, 530, 32, 86, 447, 207, 157, 680, 132, 117),
    60: (792, 330, 462, 23, 70, 354, 223, 122, 580, 91, 121),
}

# Marginal percentages (sex: female, male; age; race; county: Lake, Porter).
POPULATION_MARGINALS = {
    "hospital": {
        "total": 35838,
        "sex": (57, 43),
        "age_group": (9, 12, 30, 20, 29),
        "race": (65, 19, 16),
        "county": (88, 12),
    },
    "community": {
        "total": 654890,
        "sex": (51, 49),
        "age_group": (24, 21, 40, 9, 6),
        "race": (69, 19, 12),
        "county": (74, 26),
    },
}
SAMPLE_COUNTY_SHARE = (0.84, 0.16)


# ---------------------------------------------------------------------------
# Designs and tables
# ---------------------------------------------------------------------------


def _independent_cell_probs(sex, age, race, county) -> np.ndarray:
    sex, age, race, county = (np.asarray(v, dtype=np.float64) for v in (sex, age, race, county))
    probs = (
        (sex / sex.sum())[CELL_SEX]
        * (age / age.sum())[CELL_AGE]
        * (race / race.sum())[CELL_RACE]
        * (county / county.sum())[CELL_COUNTY]
    )
    return probs / probs.sum()


def integerize(expected: np.ndarray, total: int) -> np.ndarray:
    """Round nonnegative reals to integers summing to ``total`` (largest remainder)."""
    expected = np.asarray(expected, dtype=np.float64)
    scaled = expected * (total / expected.sum())
    base = np.floor(scaled).astype(np.int64)
    short = int(total - base.sum())
    if short:
        # stable sort keeps ties in cell order
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:short]] += 1
    return base


def marginal_table(population_name: str, total: int, sex, age_group, race, county) -> PoststratTable:
    """60-cell table whose cells are the product of the given marginal shares."""
    probs = _independent_cell_probs(sex, age_group, race, county)
    return PoststratTable(population_name, integerize(probs, total))


def default_poststrat(population_name: str) -> PoststratTable:
    m = POPULATION_MARGINALS[population_name]
    return marginal_table(population_name, m["total"], m["sex"], m["age_group"], m["race"],
                          m["county"])


def default_design(seed: int = 0, weeks: Sequence[int] = STUDY_WEEKS) -> np.ndarray:
    """Weekly test counts per cell, shape ``(len(weeks), 60)``.

    Each week's total matches the study's weekly volume; tests are spread
    over cells by a multinomial draw from that week's sex/age/race mix.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0xD5,)))
    design = np.zeros((len(weeks), N_CELLS), dtype=np.int64)
    for i, w in enumerate(weeks):
        row = WEEKLY_SAMPLE[w]
        total, male, female = row[0], row[1], row[2]
        probs = _independent_cell_probs((female, male), row[3:8], row[8:11], SAMPLE_COUNTY_SHARE)
        design[i] = rng.multinomial(total, probs)
    return design


def default_truth(weeks: Sequence[int] = STUDY_WEEKS, baseline: float = 0.005,
                  wave_height: float = 2.2, wave_peak: float = 46.0, wave_width: float = 6.0,
                  gamma: float = 0.995, delta: float = 0.77) -> ParameterDraw:
    """Ground-truth parameters: flat baseline incidence plus a Gaussian-shaped autumn wave."""
    weeks = np.asarray(list(weeks), dtype=np.float64)
    wave = wave_height * np.exp(-0.5 * ((weeks - wave_peak) / wave_width) ** 2)
    alpha_time = wave - wave.mean()
    alpha_age = np.array([-0.4, 0.2, 0.1, -0.1, 0.2])
    alpha_race = np.array([-0.15, 0.25, 0.1])
    alpha_county = np.array([0.1, -0.1])
    alpha_age_male = np.array([0.05, 0.1, -0.05, 0.0, -0.1])

    def sd(a):
        return float(np.sqrt(np.mean(a ** 2)))

    return ParameterDraw(
        # time effects are centered; off-wave weeks sit at -mean(wave)
        beta1=float(logit(baseline)) + float(wave.mean()),
        beta2=0.1,
        alpha_age=alpha_age,
        alpha_race=alpha_race,
        alpha_county=alpha_county,
        alpha_time=alpha_time,
        alpha_age_male=alpha_age_male,
        sigma_age=sd(alpha_age),
        sigma_race=sd(alpha_race),
        sigma_county=sd(alpha_county),
        sigma_age_male=sd(alpha_age_male),
        sigma_time=sd(alpha_time),
        gamma=gamma,
        delta=delta,
        first_week=int(weeks[0]),
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _design_array(design, weeks) -> np.ndarray:
    if isinstance(design, Mapping):
        arr = np.zeros((len(weeks), N_CELLS), dtype=np.int64)
        first = weeks[0]
        for (week, cell), n in design.items():
            idx = cell if isinstance(cell, (int, np.integer)) else cell.index
            arr[int(week) - first, idx] = n
        return arr
    arr = np.asarray(design, dtype=np.int64)
    if arr.shape != (len(weeks), N_CELLS):
        raise ValueError(f"design must have shape ({len(weeks)}, {N_CELLS}), got {arr.shape}")
    return arr


def generate_counts(truth: ParameterDraw, design, seed: int) -> CellWeekCounts:
    """Binomial positives per (cell, week) at the truth's analytic incidence."""
    weeks = list(truth.weeks)
    n = _design_array(design, weeks)
    if (n < 0).any():
        raise ValueError("design sample sizes must be nonnegative")
    vec = truth.to_vector()
    eta = cell_effects(vec, truth.layout)[None, :] + truth.alpha_time[:, None]
    p = analytic_incidence(expit(eta), truth.gamma, truth.delta)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0x6E,)))
    y = rng.binomial(n, np.clip(p, 0.0, 1.0))
    wi, ci = np.nonzero(n)
    return CellWeekCounts(cell=ci, week=np.asarray(weeks)[wi], n=n[wi, ci], y=y[wi, ci])


def counts_to_records(counts: CellWeekCounts) -> list[TestRecord]:
    records = []
    for c, w, n, y in zip(counts.cell, counts.week, counts.n, counts.y):
        cell = ALL_CELLS[c]
        records.extend(TestRecord(int(w), cell, 1) for _ in range(int(y)))
        records.extend(TestRecord(int(w), cell, 0) for _ in range(int(n - y)))
    return records


def generate(truth: ParameterDraw, design, seed: int) -> list[TestRecord]:
    """Person-level test records drawn from the model at ``truth``."""
    return counts_to_records(generate_counts(truth, design, seed))


def true_prevalence(truth: ParameterDraw, table: PoststratTable) -> np.ndarray:
    """Population-weighted true incidence per week under ``truth``."""
    eta = cell_effects(truth.to_vector(), truth.layout)[None, :] + truth.alpha_time[:, None]
    pi = expit(eta)
    w = table.counts / table.total
    return pi @ w


@dataclass(frozen=True)
class Scenario:
    truth: ParameterDraw
    design: np.ndarray
    counts: CellWeekCounts
    hospital: PoststratTable
    community: PoststratTable

    @property
    def weeks(self) -> range:
        return self.truth.weeks


def default_scenario(seed: int = 0, **truth_kw) -> Scenario:
    truth = default_truth(**truth_kw)
    design = default_design(seed, truth.weeks)
    return Scenario(
        truth=truth,
        design=design,
        counts=generate_counts(truth, design, seed),
        hospital=default_poststrat("hospital"),
        community=default_poststrat("community"),
    )


# ---------------------------------------------------------------------------
# Grid oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridMoments:
    mean: np.ndarray
    sd: np.ndarray
    bounds: tuple


def grid_oracle(
    log_density: Callable[..., np.ndarray],
    center: Sequence[float],
    scale: Sequence[float],
    points: int = 2001,
    width: float = 8.0,
    cutoff: float = 40.0,
    transform: Callable[..., np.ndarray] | None = None,
) -> GridMoments:
    """Posterior mean and sd of a density in one or two dimensions by quadrature.

    ``log_density`` is vectorized: it receives one array per dimension
    (broadcast against each other) and returns unnormalized log density.
    The grid first spans ``center +/- width * scale`` and widens until the
    edges carry negligible mass, then is refined to the region where the
    log density lies within ``cutoff`` of its maximum. With ``transform``
    the moments are those of ``transform(*mesh)`` instead of the grid
    coordinates.
    """
    center = np.atleast_1d(np.asarray(center, dtype=np.float64))
    scale = np.atleast_1d(np.asarray(scale, dtype=np.float64))
    dim = center.size
    if dim not in (1, 2):
        raise ValueError("grid oracle supports one or two free parameters")
    if points < 2000:
        raise ValueError("use at least 2000 grid points per dimension")
    lo = center - width * scale
    hi = center + width * scale

    def evaluate(lo, hi):
        axes = [np.linspace(lo[d], hi[d], points) for d in range(dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        with np.errstate(all="ignore"):
            logp = np.asarray(log_density(*mesh), dtype=np.float64)
        logp = np.where(np.isnan(logp), -np.inf, logp)
        if not np.isfinite(logp).any():
            raise ValueError("log density is not finite anywhere on the grid")
        return axes, mesh, logp - logp.max()

    for _ in range(20):
        axes, mesh, logp = evaluate(lo, hi)
        widened = False
        for d in range(dim):
            edge_lo = np.take(logp, 0, axis=d).max()
            edge_hi = np.take(logp, -1, axis=d).max()
            span = hi[d] - lo[d]
            if edge_lo > -cutoff:
                lo[d] -= span
                widened = True
            if edge_hi > -cutoff:
                hi[d] += span
                widened = True
        if not widened:
            break

    # refine: shrink to the support, padded by two grid cells
    for d in range(dim):
        support = np.any(logp > -cutoff, axis=tuple(k for k in range(dim) if k != d))
        idx = np.nonzero(support)[0]
        step = axes[d][1] - axes[d][0]
        lo[d] = axes[d][max(idx[0] - 2, 0)] - step
        hi[d] = axes[d][min(idx[-1] + 2, points - 1)] + step
    axes, mesh, logp = evaluate(lo, hi)

    w = np.exp(logp)
    w /= w.sum()
    if transform is not None:
        mesh = [np.asarray(transform(*mesh), dtype=np.float64)]
    mean = np.array([(w * m).sum() for m in mesh])
    var = np.array([(w * (m - mu) ** 2).sum() for m, mu in zip(mesh, mean)])
    return GridMoments(mean=mean, sd=np.sqrt(var), bounds=(tuple(lo), tuple(hi)))


class ConjugateNormal:
    """Normal mean with a normal prior and known observation noise.

    A sampler target whose posterior is available in closed form.
    """

    def __init__(self, data, noise_sd: float = 1.0, prior_mean: float = 0.0, prior_sd: float = 1.0):
        self.data = np.asarray(data, dtype=np.float64)
        self.noise_sd = float(noise_sd)
        self.prior_mean = float(prior_mean)
        self.prior_sd = float(prior_sd)
        self.dim = 1
        self.param_names = ["mu"]

    @property
    def posterior_precision(self) -> float:
        return 1.0 / self.prior_sd ** 2 + self.data.size / self.noise_sd ** 2

    @property
    def posterior_mean(self) -> float:
        num = self.prior_mean / self.prior_sd ** 2 + self.data.sum() / self.noise_sd ** 2
        return num / self.posterior_precision

    @property
    def posterior_sd(self) -> float:
        return float(np.sqrt(1.0 / self.posterior_precision))

    def log_density(self, mu):
        """Unnormalized log posterior; vectorized over ``mu``."""
        mu = np.asarray(mu, dtype=np.float64)
        prior = -0.5 * ((mu - self.prior_mean) / self.prior_sd) ** 2
        s1 = self.data.sum()
        s2 = float(self.data @ self.data)
        lik = -0.5 * (s2 - 2.0 * mu * s1 + self.data.size * mu ** 2) / self.noise_sd ** 2
        return prior + lik

    def log_density_and_gradient(self, theta):
        mu = float(theta[0])
        lp = float(self.log_density(mu))
        grad = -(mu - self.prior_mean) / self.prior_sd ** 2 + (self.data.sum() - self.data.size * mu) / self.noise_sd ** 2
        return lp, np.array([grad])
