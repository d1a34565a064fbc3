"""Model checking and comparison of weekly surveillance series."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .model import CalibrationData, HierarchicalModel, PoststratTable, analytic_incidence, cell_effects
from .poststrat import PrevalenceSeries, as_counts, poststratify, raw_weekly_positivity
from .sampler import PosteriorDraws, SamplerConfig, sample

METRIC_COLUMNS = ("week", "name", "value")


class InsufficientOverlap(ValueError):
    pass


@dataclass(frozen=True)
class MetricSeries:
    name: str
    weeks: tuple
    values: np.ndarray  # nan marks a missing week
    units: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.weeks),):
            raise ValueError("one value per week required")
        weeks = tuple(int(w) for w in self.weeks)
        if weeks and list(weeks) != list(range(weeks[0], weeks[0] + len(weeks))):
            raise ValueError("metric series weeks must be contiguous")
        object.__setattr__(self, "weeks", weeks)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_prevalence(cls, series: PrevalenceSeries, name: str | None = None):
        return cls(name or f"mrp_{series.population_name}", series.weeks, series.mean, "proportion")

    def on_weeks(self, weeks: Sequence[int]) -> np.ndarray:
        """Values aligned to ``weeks``; weeks outside the series are missing."""
        lookup = dict(zip(self.weeks, self.values))
        return np.array([lookup.get(int(w), np.nan) for w in weeks])


def load_metric_series(path) -> list[MetricSeries]:
    """Read a long-format ``week,name,value`` file; blank values are missing."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metric series file not found: {path}")
    data: dict[str, dict[int, float]] = {}
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in next(reader, ()))
        if header != METRIC_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(METRIC_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: row {lineno}: expected 3 fields")
            try:
                week = int(row[0])
                value = float(row[2]) if row[2].strip() not in ("", "NA", "nan") else np.nan
            except ValueError:
                raise ValueError(f"{path}: row {lineno}: malformed week or value") from None
            series = data.setdefault(row[1].strip(), {})
            if week in series:
                raise ValueError(f"{path}: row {lineno}: duplicate week {week} for {row[1]!r}")
            series[week] = value
    out = []
    for name, values in data.items():
        weeks = range(min(values), max(values) + 1)
        out.append(MetricSeries(name, tuple(weeks), [values.get(w, np.nan) for w in weeks]))
    return out


def write_metric_series(series: Iterable[MetricSeries], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for s in series:
            for week, v in zip(s.weeks, s.values):
                w.writerow([week, s.name, "" if np.isnan(v) else repr(float(v))])
    return path


# ---------------------------------------------------------------------------
# Peaks and lead-lag
# ---------------------------------------------------------------------------


def centered_moving_average(values, window: int = 3) -> np.ndarray:
    """Mean of the non-missing values in a centered window (truncated at the ends)."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd integer")
    values = np.asarray(values, dtype=np.float64)
    half = window // 2
    out = np.full(values.size, np.nan)
    for i in range(values.size):
        block = values[max(0, i - half): i + half + 1]
        block = block[~np.isnan(block)]
        if block.size:
            out[i] = block.mean()
    return out


def peak_week(series: MetricSeries, window: int = 3) -> int:
    """Week of the smoothed maximum; ties go to the earliest week."""
    n_ok = int(np.sum(~np.isnan(series.values)))
    if n_ok == 0:
        raise ValueError(f"series {series.name!r} has no observed values")
    if n_ok < window:
        raise ValueError(f"series {series.name!r} has {n_ok} observed values; need >= {window}")
    smooth = centered_moving_average(series.values, window)
    best = np.nanmax(smooth)
    tol = 1e-12 * max(1.0, abs(best))
    idx = int(np.flatnonzero(smooth >= best - tol)[0])
    return series.weeks[idx]


@dataclass(frozen=True)
class LeadLag:
    best_lag: int
    best_correlation: float
    lags: tuple
    correlations: np.ndarray
    overlaps: tuple = field(default=())


def lead_lag(a: MetricSeries, b: MetricSeries, max_lag: int = 4, min_overlap: int = 8) -> LeadLag:
    """Cross-correlation of week-over-week changes of ``a`` and ``b``.

    The correlation at lag ``k`` pairs the change in ``a`` at week ``t``
    with the change in ``b`` at week ``t + k``; a positive best lag means
    ``a`` moves first. Ties go to the lag closest to zero.
    """
    weeks = sorted(set(a.weeks) | set(b.weeks))
    grid = range(weeks[0], weeks[-1] + 1)
    da = np.diff(a.on_weeks(grid))
    db = np.diff(b.on_weeks(grid))
    lags = tuple(range(-max_lag, max_lag + 1))
    corrs = np.empty(len(lags))
    overlaps = []
    for k, lag in enumerate(lags):
        if lag >= 0:
            x, y = da[: da.size - lag], db[lag:]
        else:
            x, y = da[-lag:], db[: db.size + lag]
        ok = ~np.isnan(x) & ~np.isnan(y)
        overlaps.append(int(ok.sum()))
        if ok.sum() < min_overlap:
            raise InsufficientOverlap(
                f"lag {lag}: only {int(ok.sum())} overlapping differenced weeks; "
                f"need at least {min_overlap}"
            )
        x, y = x[ok], y[ok]
        if x.std() == 0 or y.std() == 0:
            corrs[k] = 0.0
        else:
            corrs[k] = float(np.corrcoef(x, y)[0, 1])
    best = np.nanmax(corrs)
    candidates = [lags[k] for k in range(len(lags)) if corrs[k] >= best - 1e-12]
    best_lag = min(candidates, key=lambda v: (abs(v), v))
    return LeadLag(best_lag, float(corrs[lags.index(best_lag)]), lags, corrs, tuple(overlaps))


# ---------------------------------------------------------------------------
# Posterior predictive check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictiveCheck:
    weeks: tuple
    tests: np.ndarray
    observed: np.ndarray  # nan where no tests
    lower: np.ndarray
    upper: np.ndarray
    covered: np.ndarray  # False where missing

    @property
    def missing(self) -> np.ndarray:
        return self.tests == 0

    @property
    def coverage(self) -> float:
        ok = ~self.missing
        return float(self.covered[ok].mean()) if ok.any() else float("nan")


def replicate_positives(draws: PosteriorDraws, records, seed: int,
                        weeks: Sequence[int] | None = None) -> np.ndarray:
    """Replicated weekly positives: ``(n_draws, n_weeks)``, same tests per cell-week."""
    counts = as_counts(records)
    layout = draws.layout
    weeks = tuple(layout.weeks if weeks is None else weeks)
    flat = draws.flat()
    gamma = flat[:, layout.slices["gamma"]][:, 0]
    delta = flat[:, layout.slices["delta"]][:, 0]
    week_pos = {w: k for k, w in enumerate(weeks)}
    keep = np.array([int(w) in week_pos for w in counts.week], dtype=bool)
    cell = counts.cell[keep]
    tpos = np.array([layout.week_position(w) for w in counts.week[keep]], dtype=np.int64)
    out_pos = np.array([week_pos[int(w)] for w in counts.week[keep]], dtype=np.int64)
    n = counts.n[keep]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0x99C,)))
    out = np.zeros((flat.shape[0], len(weeks)), dtype=np.int64)
    chunk = 256
    for start in range(0, flat.shape[0], chunk):
        block = flat[start:start + chunk]
        eta = cell_effects(block, layout)[:, cell] + block[:, layout.slices["alpha_time"]][:, tpos]
        p = analytic_incidence(expit(eta), gamma[start:start + chunk, None],
                               delta[start:start + chunk, None])
        y = rng.binomial(n[None, :], np.clip(p, 0.0, 1.0))
        for r in range(block.shape[0]):
            out[start + r] = np.bincount(out_pos, weights=y[r], minlength=len(weeks))
    return out


def posterior_predictive_check(draws: PosteriorDraws, records, seed: int = 0,
                               weeks: Sequence[int] | None = None,
                               level: float = 0.95) -> PredictiveCheck:
    """Compare observed weekly positivity with its posterior predictive distribution."""
    if len(draws) == 0:
        raise ValueError("posterior predictive check needs at least one draw")
    weeks = tuple(draws.layout.weeks if weeks is None else weeks)
    raw = raw_weekly_positivity(records, weeks)
    rep = replicate_positives(draws, records, seed, weeks)
    tests = raw.tests
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = rep / np.where(tests > 0, tests, np.nan)
    tail = (1.0 - level) / 2.0
    lo = np.full(len(weeks), np.nan)
    hi = np.full(len(weeks), np.nan)
    ok = tests > 0
    if ok.any():
        q = np.quantile(rates[:, ok], [tail, 1.0 - tail], axis=0)
        lo[ok], hi[ok] = q[0], q[1]
    observed = raw.rate
    covered = ok & (observed >= lo) & (observed <= hi)
    return PredictiveCheck(weeks, tests, observed, lo, hi, covered)


# ---------------------------------------------------------------------------
# Prior sensitivity sweep
# ---------------------------------------------------------------------------


def sweep_calibration(base: CalibrationData, sensitivity: float, trials: int = 100) -> CalibrationData:
    """Swap the sensitivity evidence for a single ``round(trials*s)/trials`` study."""
    return CalibrationData(base.specificity_trials, ((int(round(trials * sensitivity)), trials),))


def sensitivity_sweep(
    records,
    weeks: Sequence[int],
    tables: Sequence[PoststratTable],
    values: Sequence[float] = (0.70, 0.65, 0.60, 0.55),
    calibration: CalibrationData | None = None,
    config: SamplerConfig | None = None,
    fixed_gamma: float | None = None,
    **model_kw,
) -> dict[float, list[PrevalenceSeries]]:
    """Refit under each prior sensitivity centre and poststratify.

    A sweep value of exactly 1 means a perfect test: sensitivity is then
    held at 1 rather than estimated.
    """
    counts = as_counts(records)
    calibration = calibration or CalibrationData.default()
    out = {}
    for s in values:
        if not 0.0 < s <= 1.0:
            raise ValueError(f"sensitivity sweep value {s} outside (0, 1]")
        model = HierarchicalModel(
            counts, sweep_calibration(calibration, s), weeks,
            fixed_gamma=fixed_gamma, fixed_delta=1.0 if s == 1.0 else None, **model_kw,
        )
        draws = sample(model, config)
        out[s] = [poststratify(draws, t) for t in tables]
    return out


def sweep_ratio(low: PrevalenceSeries, high: PrevalenceSeries) -> float:
    """Ratio of the average posterior-mean prevalence under two sweep values."""
    return float(np.mean(low.mean) / np.mean(high.mean))


def trend_agreement(a: PrevalenceSeries, b: PrevalenceSeries) -> float:
    """Fraction of weeks whose week-over-week change has the same sign in both series."""
    da, db = np.sign(np.diff(a.mean)), np.sign(np.diff(b.mean))
    return float(np.mean(da == db))
