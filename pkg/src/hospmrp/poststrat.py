"""Poststratified prevalence series and descriptive summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cells import ALL_CELLS, FIELDS, N_CELLS
from .model import CellWeekCounts, PoststratTable, incidence_grid
from .sampler import PosteriorDraws

SERIES_COLUMNS = ("week", "population", "mean", "sd", "q025", "q25", "q75", "q975")
_CHUNK = 512


def as_counts(records) -> CellWeekCounts:
    if isinstance(records, CellWeekCounts):
        return records
    return CellWeekCounts.from_records(records)


def weighted_prevalence(pi_hat: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Population-weighted mean over the trailing cell axis of ``pi_hat``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("population counts sum to zero")
    return pi_hat @ (counts / counts.sum())


@dataclass(frozen=True)
class PrevalenceSeries:
    population_name: str
    weeks: tuple
    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    q975: np.ndarray
    draws: np.ndarray | None = None  # (n_draws, n_weeks)

    @classmethod
    def from_draws(cls, population_name: str, weeks: Sequence[int], draws: np.ndarray):
        draws = np.asarray(draws, dtype=np.float64)
        q = np.quantile(draws, [0.025, 0.25, 0.75, 0.975], axis=0)
        return cls(
            population_name=population_name,
            weeks=tuple(int(w) for w in weeks),
            mean=draws.mean(axis=0),
            sd=draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1]),
            q025=q[0], q25=q[1], q75=q[2], q975=q[3],
            draws=draws,
        )

    def rows(self):
        for k, w in enumerate(self.weeks):
            yield (w, self.population_name, self.mean[k], self.sd[k], self.q025[k],
                   self.q25[k], self.q75[k], self.q975[k])


def poststratify(draws: PosteriorDraws, table: PoststratTable,
                 weeks: Sequence[int] | None = None) -> PrevalenceSeries:
    """Weekly population prevalence: the ``N_j``-weighted mean of true cell incidence."""
    if draws.layout is None:
        raise ValueError("draws do not carry the hierarchical model layout")
    if len(draws) == 0:
        raise ValueError("no posterior draws to poststratify")
    counts = np.asarray(table.counts)
    if counts.shape != (N_CELLS,):
        raise ValueError(f"poststratification table must cover all {N_CELLS} cells")
    weeks = tuple(draws.layout.weeks if weeks is None else weeks)
    flat = draws.flat()
    out = np.empty((flat.shape[0], len(weeks)))
    for start in range(0, flat.shape[0], _CHUNK):
        block = flat[start:start + _CHUNK]
        out[start:start + _CHUNK] = weighted_prevalence(
            incidence_grid(block, draws.layout, weeks), counts
        )
    return PrevalenceSeries.from_draws(table.population_name, weeks, out)


# ---------------------------------------------------------------------------
# Raw positivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeeklyPositivity:
    weeks: tuple
    positives: np.ndarray
    tests: np.ndarray

    @property
    def rate(self) -> np.ndarray:
        """positives / tests; ``nan`` marks weeks without tests."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.tests > 0, self.positives / np.maximum(self.tests, 1), np.nan)

    @property
    def missing(self) -> np.ndarray:
        return self.tests == 0


def raw_weekly_positivity(records, weeks: Sequence[int] | None = None) -> WeeklyPositivity:
    counts = as_counts(records)
    if weeks is None:
        observed = counts.weeks_observed
        if observed.size == 0:
            return WeeklyPositivity((), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        weeks = range(int(observed.min()), int(observed.max()) + 1)
    weeks = tuple(int(w) for w in weeks)
    pos = {w: k for k, w in enumerate(weeks)}
    positives = np.zeros(len(weeks), dtype=np.int64)
    tests = np.zeros(len(weeks), dtype=np.int64)
    for w, n, y in zip(counts.week, counts.n, counts.y):
        k = pos.get(int(w))
        if k is not None:
            tests[k] += n
            positives[k] += y
    return WeeklyPositivity(weeks, positives, tests)


# ---------------------------------------------------------------------------
# Table 1 style summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DescriptiveSummary:
    label: str
    size: int
    prevalence: float | None  # percent; None for population tables
    marginals: dict  # field -> {level: percent}

    def lines(self, digits: int = 0) -> list[str]:
        out = [f"Size\t{self.size}"]
        prev = "NA" if self.prevalence is None else f"{self.prevalence:.{digits}f}"
        out.append(f"Prevalence(%)\t{prev}")
        for name, block in self.marginals.items():
            for level, pct in block.items():
                out.append(f"{level}(%)\t{pct:.{digits}f}")
        return out


def _cell_marginals(cell_counts: np.ndarray) -> dict:
    total = cell_counts.sum()
    out = {}
    for name, levels in FIELDS.items():
        block = {}
        for level in levels:
            mask = np.array([getattr(c, name) == level for c in ALL_CELLS])
            block[level] = 100.0 * cell_counts[mask].sum() / total
        out[name] = block
    return out


def describe(data, label: str | None = None) -> DescriptiveSummary:
    """Sample size, raw prevalence and demographic composition."""
    if isinstance(data, PoststratTable):
        counts = np.asarray(data.counts, dtype=np.float64)
        return DescriptiveSummary(
            label=label or data.population_name,
            size=data.total,
            prevalence=None,
            marginals=_cell_marginals(counts),
        )
    agg = as_counts(data)
    if len(agg) == 0 or agg.n.sum() == 0:
        raise ValueError("cannot describe an empty dataset")
    per_cell = np.bincount(agg.cell, weights=agg.n, minlength=N_CELLS)
    size = int(agg.n.sum())
    return DescriptiveSummary(
        label=label or "sample",
        size=size,
        prevalence=100.0 * agg.y.sum() / size,
        marginals=_cell_marginals(per_cell),
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_series_csv(series: Iterable[PrevalenceSeries], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for s in series:
            for row in s.rows():
                w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])
    return path


def read_series_csv(path) -> list[PrevalenceSeries]:
    """Summary-only series (no draw matrix) in file order of populations."""
    path = Path(path)
    grouped: dict[str, list] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != SERIES_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(SERIES_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SERIES_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(SERIES_COLUMNS)} fields")
            grouped.setdefault(row[1], []).append(row)
    out = []
    for name, rows in grouped.items():
        cols = list(zip(*rows))
        vals = [np.array([float(v) for v in col]) for col in cols[2:]]
        out.append(PrevalenceSeries(name, tuple(int(w) for w in cols[0]), *vals))
    return out


__all__ = [
    "DescriptiveSummary",
    "PrevalenceSeries",
    "WeeklyPositivity",
    "describe",
    "poststratify",
    "raw_weekly_positivity",
    "read_series_csv",
    "weighted_prevalence",
    "write_series_csv",
]
