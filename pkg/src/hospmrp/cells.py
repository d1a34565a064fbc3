"""Demographic levels and the 60-cell poststratification grid.

Cells are enumerated in a fixed order (sex slowest, county fastest) so that
a cell can be referred to either by its :class:`Demographics` value or by an
integer index in ``range(N_CELLS)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

SEX_LEVELS = ("female", "male")
AGE_LEVELS = ("0-17", "18-34", "35-64", "65-74", "75+")
RACE_LEVELS = ("white", "black", "other")
COUNTY_LEVELS = ("Lake", "Porter")

FIELDS = {
    "sex": SEX_LEVELS,
    "age_group": AGE_LEVELS,
    "race": RACE_LEVELS,
    "county": COUNTY_LEVELS,
}

N_CELLS = len(SEX_LEVELS) * len(AGE_LEVELS) * len(RACE_LEVELS) * len(COUNTY_LEVELS)


class LevelError(ValueError):
    """An unknown categorical level was supplied."""


def normalize_level(field: str, value: str) -> str:
    """Map ``value`` to the canonical spelling of a level of ``field``.

    Matching is case-insensitive after trimming whitespace.
    """
    allowed = FIELDS[field]
    key = str(value).strip().lower()
    for level in allowed:
        if level.lower() == key:
            return level
    raise LevelError(
        f"unknown {field} level {value!r}; allowed levels: {', '.join(allowed)}"
    )


@dataclass(frozen=True, order=True)
class Demographics:
    sex: str
    age_group: str
    race: str
    county: str

    def __post_init__(self):
        for name in FIELDS:
            canonical = normalize_level(name, getattr(self, name))
            object.__setattr__(self, name, canonical)

    @property
    def male(self) -> float:
        """Centered sex indicator: +0.5 for men, -0.5 for women."""
        return 0.5 if self.sex == "male" else -0.5

    @property
    def index(self) -> int:
        return cell_index(self)

    def level_indices(self) -> tuple[int, int, int, int]:
        return (
            SEX_LEVELS.index(self.sex),
            AGE_LEVELS.index(self.age_group),
            RACE_LEVELS.index(self.race),
            COUNTY_LEVELS.index(self.county),
        )


def cell_index(cell: Demographics) -> int:
    s, a, r, c = cell.level_indices()
    return ((s * len(AGE_LEVELS) + a) * len(RACE_LEVELS) + r) * len(COUNTY_LEVELS) + c


ALL_CELLS: tuple[Demographics, ...] = tuple(
    Demographics(*combo)
    for combo in itertools.product(SEX_LEVELS, AGE_LEVELS, RACE_LEVELS, COUNTY_LEVELS)
)

# Per-cell design columns, indexed by cell index.
CELL_SEX = np.array([SEX_LEVELS.index(c.sex) for c in ALL_CELLS], dtype=np.int64)
CELL_MALE = np.array([c.male for c in ALL_CELLS], dtype=np.float64)
CELL_AGE = np.array([AGE_LEVELS.index(c.age_group) for c in ALL_CELLS], dtype=np.int64)
CELL_RACE = np.array([RACE_LEVELS.index(c.race) for c in ALL_CELLS], dtype=np.int64)
CELL_COUNTY = np.array([COUNTY_LEVELS.index(c.county) for c in ALL_CELLS], dtype=np.int64)
