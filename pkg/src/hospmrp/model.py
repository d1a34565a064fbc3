"""Hierarchical logistic regression with imperfect-test measurement error.

The true incidence of cell ``j`` in week ``t`` is

    logit(pi) = beta1 + beta2*male + a_age + a_race + a_county + a_time + a_age_male*male

and a test comes back positive with probability
``p = (1 - gamma) * (1 - pi) + delta * pi`` where ``gamma`` is specificity and
``delta`` sensitivity. Individual test results are aggregated to binomial
counts per (cell, week).

:class:`HierarchicalModel` evaluates the joint log posterior on an
unconstrained scale (log for scales, logit for gamma/delta) together with its
exact gradient. Each group of varying intercepts is stored either directly
or non-centered (``alpha = sigma * z``); by default the demographic groups
are direct and the weekly effects non-centered, since the weekly scale is the
weakly identified one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numba
import numpy as np
from scipy.special import expit, logit

from .cells import (
    AGE_LEVELS,
    ALL_CELLS,
    CELL_AGE,
    CELL_COUNTY,
    CELL_MALE,
    CELL_RACE,
    COUNTY_LEVELS,
    N_CELLS,
    RACE_LEVELS,
    Demographics,
    cell_index,
)

P_FLOOR = 1e-12
HYPER_SCALE = 2.5
TIME_HYPER_SCALE = 5.0
BETA_PRIOR_SD = 2.5

GROUPS = ("age", "race", "county", "age_male")
ALL_GROUPS = GROUPS + ("time",)
# Demographic effects are pinned down by thousands of tests per level, so
# they sample best centered; weekly effects see far fewer positives.
DEFAULT_CENTERED = frozenset(GROUPS)
GROUP_SIZES = {
    "age": len(AGE_LEVELS),
    "race": len(RACE_LEVELS),
    "county": len(COUNTY_LEVELS),
    "age_male": len(AGE_LEVELS),
}
GROUP_LABELS = {
    "age": AGE_LEVELS,
    "race": RACE_LEVELS,
    "county": COUNTY_LEVELS,
    "age_male": AGE_LEVELS,
}

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class UnknownWeekError(KeyError):
    def __init__(self, week):
        super().__init__(week)
        self.week = week

    def __str__(self):
        return f"week {self.week} has no time effect in this parameter draw"


class NonFiniteLogDensity(RuntimeError):
    """Log posterior evaluated to a non-finite value at an interior point."""


# ---------------------------------------------------------------------------
# Domain records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestRecord:
    week: int
    demographics: Demographics
    result: int

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.result not in (0, 1):
            raise ValueError(f"result must be 0 or 1, got {self.result!r}")


@dataclass(frozen=True)
class PoststratTable:
    """Population counts ``N_j`` over the 60 demographic cells."""

    population_name: str
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (N_CELLS,):
            raise ValueError(f"expected {N_CELLS} cell counts, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("population counts must be nonnegative")
        if counts.sum() <= 0:
            raise ValueError("population table has zero total count")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_mapping(cls, population_name: str, counts: Mapping[Demographics, int]):
        missing = [c for c in ALL_CELLS if c not in counts]
        if missing:
            listed = "; ".join(_cell_label(c) for c in missing)
            raise ValueError(f"poststratification table missing cells: {listed}")
        arr = np.zeros(N_CELLS, dtype=np.int64)
        for cell, n in counts.items():
            arr[cell_index(cell)] = int(n)
        return cls(population_name, arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def as_mapping(self) -> dict[Demographics, int]:
        return {cell: int(n) for cell, n in zip(ALL_CELLS, self.counts)}


def _cell_label(cell: Demographics) -> str:
    return f"{cell.sex}/{cell.age_group}/{cell.race}/{cell.county}"


def _check_pairs(pairs, kind):
    out = []
    for y, n in pairs:
        y, n = int(y), int(n)
        if n < 0 or y < 0 or y > n:
            raise ValueError(f"invalid {kind} calibration pair {y}/{n}: need 0 <= y <= n")
        out.append((y, n))
    return tuple(out)


# Validation studies of the PCR assay: known negatives (specificity) and
# known positives (sensitivity), as (y, n).
DEFAULT_SPECIFICITY_TRIALS = (
    (0, 0), (368, 371), (30, 30), (70, 70), (1102, 1102), (300, 300), (311, 311),
    (500, 500), (198, 200), (99, 99), (29, 31), (146, 150), (105, 108), (50, 52),
)
DEFAULT_SENSITIVITY_TRIALS = ((70, 100), (78, 85), (27, 37), (25, 35))


@dataclass(frozen=True)
class CalibrationData:
    specificity_trials: tuple = ()
    sensitivity_trials: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self, "specificity_trials", _check_pairs(self.specificity_trials, "specificity")
        )
        object.__setattr__(
            self, "sensitivity_trials", _check_pairs(self.sensitivity_trials, "sensitivity")
        )

    @classmethod
    def default(cls) -> "CalibrationData":
        return cls(DEFAULT_SPECIFICITY_TRIALS, DEFAULT_SENSITIVITY_TRIALS)

    def totals(self) -> tuple[int, int, int, int]:
        """``(y_spec, n_spec, y_sens, n_sens)`` summed over trials."""
        ys = sum(y for y, _ in self.specificity_trials)
        ns = sum(n for _, n in self.specificity_trials)
        yd = sum(y for y, _ in self.sensitivity_trials)
        nd = sum(n for _, n in self.sensitivity_trials)
        return ys, ns, yd, nd


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class Layout:
    """Positions of each named parameter block in a flat constrained vector."""

    def __init__(self, weeks: Sequence[int]):
        self.weeks = tuple(int(w) for w in weeks)
        if not self.weeks:
            raise ValueError("week range is empty")
        if list(self.weeks) != list(range(self.weeks[0], self.weeks[0] + len(self.weeks))):
            raise ValueError("weeks must be contiguous and increasing")
        self.first_week = self.weeks[0]
        blocks = [
            ("beta1", 1),
            ("beta2", 1),
            ("alpha_age", GROUP_SIZES["age"]),
            ("alpha_race", GROUP_SIZES["race"]),
            ("alpha_county", GROUP_SIZES["county"]),
            ("alpha_time", len(self.weeks)),
            ("alpha_age_male", GROUP_SIZES["age_male"]),
            ("sigma_age", 1),
            ("sigma_race", 1),
            ("sigma_county", 1),
            ("sigma_age_male", 1),
            ("sigma_time", 1),
            ("gamma", 1),
            ("delta", 1),
        ]
        self.slices: dict[str, slice] = {}
        start = 0
        for name, size in blocks:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start
        labels = {
            "alpha_age": AGE_LEVELS,
            "alpha_race": RACE_LEVELS,
            "alpha_county": COUNTY_LEVELS,
            "alpha_time": self.weeks,
            "alpha_age_male": AGE_LEVELS,
        }
        self.names: list[str] = []
        for name, _ in blocks:
            if name in labels:
                self.names.extend(f"{name}[{lab}]" for lab in labels[name])
            else:
                self.names.append(name)

    def __eq__(self, other):
        return isinstance(other, Layout) and other.weeks == self.weeks

    def __hash__(self):
        return hash(self.weeks)

    def week_position(self, week: int) -> int:
        pos = int(week) - self.first_week
        if not 0 <= pos < len(self.weeks):
            raise UnknownWeekError(week)
        return pos


@dataclass(frozen=True)
class ParameterDraw:
    """One joint value of every model parameter on the constrained scale."""

    beta1: float
    beta2: float
    alpha_age: np.ndarray
    alpha_race: np.ndarray
    alpha_county: np.ndarray
    alpha_time: np.ndarray
    alpha_age_male: np.ndarray
    sigma_age: float
    sigma_race: float
    sigma_county: float
    sigma_age_male: float
    sigma_time: float
    gamma: float
    delta: float
    first_week: int = 18

    def __post_init__(self):
        for name, size in (
            ("alpha_age", 5), ("alpha_race", 3), ("alpha_county", 2), ("alpha_age_male", 5),
        ):
            arr = np.asarray(getattr(self, name), dtype=np.float64).copy()
            if arr.shape != (size,):
                raise ValueError(f"{name} must have {size} entries, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        at = np.asarray(self.alpha_time, dtype=np.float64).copy()
        if at.ndim != 1 or at.size == 0:
            raise ValueError("alpha_time must be a nonempty vector")
        at.setflags(write=False)
        object.__setattr__(self, "alpha_time", at)
        for name in ("sigma_age", "sigma_race", "sigma_county", "sigma_age_male", "sigma_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("gamma", "delta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def weeks(self) -> range:
        return range(self.first_week, self.first_week + self.alpha_time.size)

    @property
    def layout(self) -> Layout:
        return Layout(self.weeks)

    def time_effect(self, week: int) -> float:
        pos = int(week) - self.first_week
        if not 0 <= pos < self.alpha_time.size:
            raise UnknownWeekError(week)
        return float(self.alpha_time[pos])

    def to_vector(self) -> np.ndarray:
        lay = self.layout
        v = np.empty(lay.size)
        for name, sl in lay.slices.items():
            v[sl] = getattr(self, name)
        return v

    @classmethod
    def from_vector(cls, vec, layout: Layout) -> "ParameterDraw":
        vec = np.asarray(vec, dtype=np.float64)
        kw = {}
        for name, sl in layout.slices.items():
            block = vec[sl]
            kw[name] = float(block[0]) if sl.stop - sl.start == 1 and not name.startswith("alpha") else block
        return cls(first_week=layout.first_week, **kw)

    @classmethod
    def zeros(cls, weeks: Sequence[int], sigma: float = 1.0, gamma: float = 1.0,
              delta: float = 1.0) -> "ParameterDraw":
        weeks = list(weeks)
        return cls(
            beta1=0.0, beta2=0.0,
            alpha_age=np.zeros(5), alpha_race=np.zeros(3), alpha_county=np.zeros(2),
            alpha_time=np.zeros(len(weeks)), alpha_age_male=np.zeros(5),
            sigma_age=sigma, sigma_race=sigma, sigma_county=sigma,
            sigma_age_male=sigma, sigma_time=sigma,
            gamma=gamma, delta=delta, first_week=weeks[0],
        )

    def replace(self, **changes) -> "ParameterDraw":
        kw = {name: getattr(self, name) for name in self.__dataclass_fields__}
        kw.update(changes)
        return ParameterDraw(**kw)


# ---------------------------------------------------------------------------
# Point operations
# ---------------------------------------------------------------------------


def linear_predictor(draw: ParameterDraw, cell: Demographics, week: int) -> float:
    _, a, r, c = cell.level_indices()
    male = cell.male
    return (
        draw.beta1
        + draw.beta2 * male
        + draw.alpha_age[a]
        + draw.alpha_race[r]
        + draw.alpha_county[c]
        + draw.time_effect(week)
        + draw.alpha_age_male[a] * male
    )


def true_incidence(draw: ParameterDraw, cell: Demographics, week: int) -> float:
    return float(expit(linear_predictor(draw, cell, week)))


def analytic_incidence(pi, gamma, delta):
    """Probability of a positive test given true incidence and test accuracy."""
    return (1.0 - gamma) * (1.0 - pi) + delta * pi


def cell_effects(constrained: np.ndarray, layout: Layout) -> np.ndarray:
    """Time-invariant part of the linear predictor for every cell.

    ``constrained`` has shape ``(..., layout.size)``; result ``(..., 60)``.
    """
    s = layout.slices
    c = constrained
    a_age = c[..., s["alpha_age"]][..., CELL_AGE]
    a_race = c[..., s["alpha_race"]][..., CELL_RACE]
    a_county = c[..., s["alpha_county"]][..., CELL_COUNTY]
    a_am = c[..., s["alpha_age_male"]][..., CELL_AGE]
    b1 = c[..., s["beta1"]]
    b2 = c[..., s["beta2"]]
    return b1 + (b2 + a_am) * CELL_MALE + a_age + a_race + a_county


def incidence_grid(constrained: np.ndarray, layout: Layout, weeks: Sequence[int] | None = None):
    """True incidence for every draw, week and cell: shape ``(draws, weeks, 60)``."""
    constrained = np.atleast_2d(constrained)
    weeks = layout.weeks if weeks is None else tuple(weeks)
    pos = np.array([layout.week_position(w) for w in weeks], dtype=np.int64)
    base = cell_effects(constrained, layout)
    a_time = constrained[:, layout.slices["alpha_time"]][:, pos]
    return expit(base[:, None, :] + a_time[:, :, None])


# ---------------------------------------------------------------------------
# Aggregated data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellWeekCounts:
    """Binomial summary of test records: one row per observed (cell, week)."""

    cell: np.ndarray
    week: np.ndarray
    n: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for name in ("cell", "week", "n", "y"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.cell.shape == self.week.shape == self.n.shape == self.y.shape):
            raise ValueError("count arrays must have equal length")
        if ((self.y < 0) | (self.y > self.n)).any():
            raise ValueError("need 0 <= positives <= tests in every cell-week")

    @classmethod
    def from_records(cls, records: Iterable[TestRecord]) -> "CellWeekCounts":
        tally: dict[tuple[int, int], list[int]] = {}
        for rec in records:
            key = (int(rec.week), cell_index(rec.demographics))
            slot = tally.setdefault(key, [0, 0])
            slot[0] += 1
            slot[1] += rec.result
        keys = sorted(tally)
        return cls(
            cell=[k[1] for k in keys],
            week=[k[0] for k in keys],
            n=[tally[k][0] for k in keys],
            y=[tally[k][1] for k in keys],
        )

    @classmethod
    def empty(cls) -> "CellWeekCounts":
        return cls([], [], [], [])

    def __len__(self):
        return int(self.n.size)

    @property
    def weeks_observed(self) -> np.ndarray:
        return np.unique(self.week)


# ---------------------------------------------------------------------------
# Log posterior
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _binomial_kernel(eta, y, n, gamma, delta):
    """Bernoulli-product log likelihood at p = analytic incidence.

    Returns the total and its derivatives with respect to each eta, gamma and
    delta. Derivatives vanish where p is clamped to the floor.
    """
    k = eta.shape[0]
    d_eta = np.empty(k)
    total = 0.0
    d_gamma = 0.0
    d_delta = 0.0
    slope = delta + gamma - 1.0
    for i in range(k):
        e = eta[i]
        if e >= 0:
            z = math.exp(-e)
            pi = 1.0 / (1.0 + z)
        else:
            z = math.exp(e)
            pi = z / (1.0 + z)
        p = (1.0 - gamma) * (1.0 - pi) + delta * pi
        yi = y[i]
        fi = n[i] - yi
        if p < 1e-12:
            p = 1e-12
            dldp = 0.0
            clamped = True
        elif p > 1.0 - 1e-12:
            p = 1.0 - 1e-12
            dldp = 0.0
            clamped = True
        else:
            clamped = False
        total += yi * math.log(p) + fi * math.log1p(-p)
        if not clamped:
            dldp = yi / p - fi / (1.0 - p)
        d_eta[i] = dldp * slope * pi * (1.0 - pi)
        d_gamma -= dldp * (1.0 - pi)
        d_delta += dldp * pi
    return total, d_eta, d_gamma, d_delta


def _normal_logpdf(x, sd):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(-_LOG_SQRT_2PI - math.log(sd) - 0.5 * (x / sd) ** 2))


def _half_normal_logpdf(x, sd):
    return math.log(2.0) + _normal_logpdf(x, sd)


def _bernoulli_sum(y, n, prob):
    """sum of y*log(prob) + (n-y)*log(1-prob), with 0*log(0) = 0."""
    out = 0.0
    if y:
        out += y * math.log(prob) if prob > 0 else -math.inf
    if n - y:
        out += (n - y) * math.log1p(-prob) if prob < 1 else -math.inf
    return out


def log_posterior(
    draw: ParameterDraw,
    counts: CellWeekCounts,
    calibration: CalibrationData,
    beta_sd: float = BETA_PRIOR_SD,
) -> float:
    """Joint log posterior density on the constrained scale (no Jacobian)."""
    layout = draw.layout
    value = 0.0
    if len(counts):
        pos = np.array([layout.week_position(w) for w in counts.week], dtype=np.int64)
        vec = draw.to_vector()
        eta = cell_effects(vec, layout)[counts.cell] + draw.alpha_time[pos]
        value += _binomial_kernel(
            eta, counts.y.astype(np.float64), counts.n.astype(np.float64),
            float(draw.gamma), float(draw.delta),
        )[0]
    value += _normal_logpdf([draw.beta1, draw.beta2], beta_sd)
    for g in GROUPS:
        sigma = getattr(draw, f"sigma_{g}")
        value += _normal_logpdf(getattr(draw, f"alpha_{g}"), sigma)
        value += _half_normal_logpdf(sigma, HYPER_SCALE)
    value += _normal_logpdf(draw.alpha_time, draw.sigma_time)
    value += _half_normal_logpdf(draw.sigma_time, TIME_HYPER_SCALE)
    ys, ns, yd, nd = calibration.totals()
    value += _bernoulli_sum(ys, ns, draw.gamma)
    value += _bernoulli_sum(yd, nd, draw.delta)
    return value


@dataclass
class HierarchicalModel:
    """Unconstrained-scale posterior of the measurement-error MRP model.

    Parameters
    ----------
    counts : CellWeekCounts
        Aggregated test results. Every week must fall in ``weeks``.
    calibration : CalibrationData
        Validation-study counts informing specificity and sensitivity.
    weeks : sequence of int
        Contiguous study weeks; each receives a time effect even when no
        tests were observed that week.
    beta_sd : float
        Prior standard deviation of the intercept and the sex slope.
    centered : bool or collection of str
        Which varying-intercept groups (``"age"``, ``"race"``, ``"county"``,
        ``"age_male"``, ``"time"``) are stored directly; the rest are stored
        as standardized offsets ``z = alpha / sigma``. ``True``/``False``
        selects all or none.
    fixed_gamma, fixed_delta : float, optional
        Hold specificity / sensitivity at a known value instead of
        estimating it; the matching calibration trials are then ignored.
    """

    counts: CellWeekCounts
    calibration: CalibrationData
    weeks: Sequence[int]
    beta_sd: float = BETA_PRIOR_SD
    centered: object = DEFAULT_CENTERED
    fixed_gamma: float | None = None
    fixed_delta: float | None = None
    layout: Layout = field(init=False)

    def __post_init__(self):
        self.weeks = tuple(int(w) for w in self.weeks)
        self.layout = Layout(self.weeks)
        if self.centered is True:
            self.centered = frozenset(ALL_GROUPS)
        elif self.centered is False:
            self.centered = frozenset()
        else:
            self.centered = frozenset(self.centered)
            unknown = self.centered - set(ALL_GROUPS)
            if unknown:
                raise ValueError(f"unknown varying-intercept groups: {sorted(unknown)}")
        self._centered_flags = np.array([g in self.centered for g in ALL_GROUPS])
        if len(self.counts):
            bad = sorted(set(self.counts.week.tolist()) - set(self.weeks))
            if bad:
                raise ValueError(f"records contain weeks outside the study range: {bad}")
        self._row_cell = np.ascontiguousarray(self.counts.cell)
        self._row_time = np.ascontiguousarray(self.counts.week - self.layout.first_week)
        self._y = self.counts.y.astype(np.float64)
        self._n = self.counts.n.astype(np.float64)
        ys, ns, yd, nd = self.calibration.totals()
        self._spec = (float(ys), float(ns))
        self._sens = (float(yd), float(nd))

        n_weeks = len(self.weeks)
        blocks = [
            ("beta1", 1), ("beta2", 1),
            ("alpha_age", 5), ("alpha_race", 3), ("alpha_county", 2),
            ("alpha_time", n_weeks), ("alpha_age_male", 5),
            ("log_sigma_age", 1), ("log_sigma_race", 1), ("log_sigma_county", 1),
            ("log_sigma_age_male", 1), ("log_sigma_time", 1),
        ]
        if self.fixed_gamma is None:
            blocks.append(("logit_gamma", 1))
        if self.fixed_delta is None:
            blocks.append(("logit_delta", 1))
        self.slices: dict[str, slice] = {}
        start = 0
        for name, size in blocks:
            self.slices[name] = slice(start, start + size)
            start += size
        self.dim = start
        labels = {
            "alpha_age": AGE_LEVELS, "alpha_race": RACE_LEVELS,
            "alpha_county": COUNTY_LEVELS, "alpha_time": self.weeks,
            "alpha_age_male": AGE_LEVELS,
        }
        self.param_names: list[str] = []
        for name, _ in blocks:
            if name in labels:
                g = name[len("alpha_"):]
                stem = name if g in self.centered else "z_" + g
                self.param_names.extend(f"{stem}[{lab}]" for lab in labels[name])
            else:
                self.param_names.append(name)

    # -- transforms ---------------------------------------------------------

    def gamma_delta(self, theta) -> tuple[float, float]:
        if self.fixed_gamma is None:
            gamma = float(expit(theta[self.slices["logit_gamma"].start]))
        else:
            gamma = float(self.fixed_gamma)
        if self.fixed_delta is None:
            delta = float(expit(theta[self.slices["logit_delta"].start]))
        else:
            delta = float(self.fixed_delta)
        return gamma, delta

    def constrain(self, theta) -> np.ndarray:
        """Map unconstrained vector(s) to flat constrained vector(s) in ``layout`` order."""
        theta = np.asarray(theta, dtype=np.float64)
        single = theta.ndim == 1
        th = np.atleast_2d(theta)
        out = np.empty((th.shape[0], self.layout.size))
        s, ls = self.slices, self.layout.slices
        out[:, ls["beta1"]] = th[:, s["beta1"]]
        out[:, ls["beta2"]] = th[:, s["beta2"]]
        for g in ("age", "race", "county", "age_male", "time"):
            sigma = np.exp(th[:, s[f"log_sigma_{g}"]])
            raw = th[:, s[f"alpha_{g}"]]
            out[:, ls[f"alpha_{g}"]] = raw if g in self.centered else raw * sigma
            out[:, ls[f"sigma_{g}"]] = sigma
        if self.fixed_gamma is None:
            out[:, ls["gamma"]] = expit(th[:, s["logit_gamma"]])
        else:
            out[:, ls["gamma"]] = self.fixed_gamma
        if self.fixed_delta is None:
            out[:, ls["delta"]] = expit(th[:, s["logit_delta"]])
        else:
            out[:, ls["delta"]] = self.fixed_delta
        return out[0] if single else out

    def to_draw(self, theta) -> ParameterDraw:
        return ParameterDraw.from_vector(self.constrain(theta), self.layout)

    def unconstrain(self, draw: ParameterDraw) -> np.ndarray:
        if draw.layout != self.layout:
            raise ValueError("parameter draw covers different weeks than the model")
        theta = np.empty(self.dim)
        s = self.slices
        theta[s["beta1"]] = draw.beta1
        theta[s["beta2"]] = draw.beta2
        for g in ("age", "race", "county", "age_male", "time"):
            sigma = getattr(draw, f"sigma_{g}")
            alpha = getattr(draw, f"alpha_{g}")
            theta[s[f"alpha_{g}"]] = alpha if g in self.centered else alpha / sigma
            theta[s[f"log_sigma_{g}"]] = math.log(sigma)
        if self.fixed_gamma is None:
            theta[s["logit_gamma"]] = logit(draw.gamma)
        if self.fixed_delta is None:
            theta[s["logit_delta"]] = logit(draw.delta)
        return theta

    # -- density ------------------------------------------------------------

    def log_density(self, theta) -> float:
        return self.log_density_and_gradient(theta)[0]

    def log_density_and_gradient(self, theta) -> tuple[float, np.ndarray]:
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} parameters, got shape {theta.shape}")
        lp, grad = _joint_kernel(
            theta, self._row_cell, self._row_time, self._y, self._n,
            CELL_AGE, CELL_RACE, CELL_COUNTY, CELL_MALE, len(self.weeks), self._centered_flags,
            self._spec[0], self._spec[1], self._sens[0], self._sens[1],
            math.nan if self.fixed_gamma is None else float(self.fixed_gamma),
            math.nan if self.fixed_delta is None else float(self.fixed_delta),
            float(self.beta_sd), HYPER_SCALE, TIME_HYPER_SCALE,
        )
        if not math.isfinite(lp):
            raise NonFiniteLogDensity(f"log posterior is {lp} at an interior point")
        return lp, grad


@numba.njit(cache=True)
def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@numba.njit(cache=True)
def _joint_kernel(theta, row_cell, row_time, y, n, cell_age, cell_race, cell_county,
                  cell_male, n_weeks, centered, spec_y, spec_n, sens_y, sens_n,
                  fixed_gamma, fixed_delta, beta_sd, hyper_scale, time_scale):
    # Unconstrained layout: beta1, beta2, age[5], race[3], county[2], time[W],
    # age_male[5], log sigma (age, race, county, age_male, time), then
    # logit gamma / logit delta when not fixed.
    log_sqrt_2pi = 0.5 * math.log(2.0 * math.pi)
    grad = np.zeros(theta.shape[0])
    starts = np.array([2, 7, 10, 12 + n_weeks, 12])
    sizes = np.array([5, 3, 2, 5, n_weeks])
    sig0 = 17 + n_weeks
    sigmas = np.empty(5)
    alpha = np.empty(theta.shape[0])
    for g in range(5):
        sigmas[g] = math.exp(theta[sig0 + g])
        for k in range(starts[g], starts[g] + sizes[g]):
            alpha[k] = theta[k] if centered[g] else theta[k] * sigmas[g]

    pos = sig0 + 5
    if math.isnan(fixed_gamma):
        gamma = _expit(theta[pos])
        gamma_idx = pos
        pos += 1
    else:
        gamma = fixed_gamma
        gamma_idx = -1
    if math.isnan(fixed_delta):
        delta = _expit(theta[pos])
        delta_idx = pos
    else:
        delta = fixed_delta
        delta_idx = -1

    b1 = theta[0]
    b2 = theta[1]
    n_cells = cell_age.shape[0]
    base = np.empty(n_cells)
    for c in range(n_cells):
        a = cell_age[c]
        base[c] = (b1 + (b2 + alpha[12 + n_weeks + a]) * cell_male[c] + alpha[2 + a]
                   + alpha[7 + cell_race[c]] + alpha[10 + cell_county[c]])

    # main-data likelihood at p = (1 - gamma)(1 - pi) + delta pi
    lp = 0.0
    d_gamma = 0.0
    d_delta = 0.0
    slope = delta + gamma - 1.0
    d_cell = np.zeros(n_cells)
    d_alpha = np.zeros(theta.shape[0])
    for i in range(y.shape[0]):
        t = row_time[i]
        c = row_cell[i]
        pi = _expit(base[c] + alpha[12 + t])
        p = (1.0 - gamma) * (1.0 - pi) + delta * pi
        yi = y[i]
        fi = n[i] - yi
        if p < 1e-12:
            p = 1e-12
            dldp = 0.0
        elif p > 1.0 - 1e-12:
            p = 1.0 - 1e-12
            dldp = 0.0
        else:
            dldp = yi / p - fi / (1.0 - p)
        lp += yi * math.log(p) + fi * math.log1p(-p)
        de = dldp * slope * pi * (1.0 - pi)
        d_cell[c] += de
        d_alpha[12 + t] += de
        d_gamma -= dldp * (1.0 - pi)
        d_delta += dldp * pi
    for c in range(n_cells):
        dc = d_cell[c]
        a = cell_age[c]
        grad[0] += dc
        grad[1] += dc * cell_male[c]
        d_alpha[2 + a] += dc
        d_alpha[7 + cell_race[c]] += dc
        d_alpha[10 + cell_county[c]] += dc
        d_alpha[12 + n_weeks + a] += dc * cell_male[c]

    var_b = beta_sd * beta_sd
    lp += -2.0 * (log_sqrt_2pi + math.log(beta_sd)) - 0.5 * (b1 * b1 + b2 * b2) / var_b
    grad[0] -= b1 / var_b
    grad[1] -= b2 / var_b

    for g in range(5):
        sigma = sigmas[g]
        log_sigma = theta[sig0 + g]
        scale = time_scale if g == 4 else hyper_scale
        k0 = starts[g]
        kn = sizes[g]
        if centered[g]:
            ss = 0.0
            for k in range(k0, k0 + kn):
                ss += theta[k] * theta[k]
                grad[k] = d_alpha[k] - theta[k] / (sigma * sigma)
            lp += -kn * (log_sqrt_2pi + log_sigma) - 0.5 * ss / (sigma * sigma)
            d_ls = -kn + ss / (sigma * sigma)
        else:
            ss = 0.0
            d_ls = 0.0
            for k in range(k0, k0 + kn):
                ss += theta[k] * theta[k]
                grad[k] = d_alpha[k] * sigma - theta[k]
                d_ls += d_alpha[k] * alpha[k]
            lp += -kn * log_sqrt_2pi - 0.5 * ss
        # half-normal hyperprior and log-Jacobian of sigma = exp(log sigma)
        r = sigma / scale
        lp += math.log(2.0) - log_sqrt_2pi - math.log(scale) - 0.5 * r * r + log_sigma
        grad[sig0 + g] = d_ls + 1.0 - r * r

    # test accuracy: calibration counts, uniform prior, logit Jacobian
    if gamma_idx >= 0:
        lp += _bern(spec_y, spec_n, gamma) + math.log(gamma) + math.log1p(-gamma)
        dg = d_gamma + spec_y / gamma - (spec_n - spec_y) / (1.0 - gamma)
        grad[gamma_idx] = dg * gamma * (1.0 - gamma) + 1.0 - 2.0 * gamma
    if delta_idx >= 0:
        lp += _bern(sens_y, sens_n, delta) + math.log(delta) + math.log1p(-delta)
        dd = d_delta + sens_y / delta - (sens_n - sens_y) / (1.0 - delta)
        grad[delta_idx] = dd * delta * (1.0 - delta) + 1.0 - 2.0 * delta
    return lp, grad


@numba.njit(cache=True)
def _bern(y, n, prob):
    out = 0.0
    if y > 0:
        out += y * math.log(prob) if prob > 0 else -np.inf
    if n - y > 0:
        out += (n - y) * math.log1p(-prob) if prob < 1 else -np.inf
    return out


class Subspace:
    """Restrict a target density to a subset of its coordinates.

    Coordinates not listed in ``free`` stay at their values in ``base``.
    """

    def __init__(self, target, free: Sequence[int], base):
        self.target = target
        self.free = np.asarray(free, dtype=np.int64)
        self.base = np.asarray(base, dtype=np.float64).copy()
        self.dim = int(self.free.size)

    def embed(self, x) -> np.ndarray:
        full = self.base.copy()
        full[self.free] = x
        return full

    def log_density_and_gradient(self, x):
        lp, g = self.target.log_density_and_gradient(self.embed(x))
        return lp, g[self.free]

    def log_density(self, x):
        return self.log_density_and_gradient(x)[0]
