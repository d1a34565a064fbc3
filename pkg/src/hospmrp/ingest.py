"""Readers and writers for the pipeline's CSV inputs and the run config.

File formats (UTF-8, header row required and matched exactly):

* test records      ``week,sex,age_group,race,county,result``
* population tables ``sex,age_group,race,county,count``
* calibration       ``kind,y,n`` with ``kind`` in {sensitivity, specificity}

Categorical values match case-insensitively after trimming. The ``week``
column holds the running week index (18 = week of 2020-04-28) or a calendar
date ``YYYY-MM-DD``, which is converted with :func:`week_index`.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cells import ALL_CELLS, FIELDS, Demographics, LevelError, normalize_level
from .model import CalibrationData, PoststratTable, TestRecord
from .sampler import SamplerConfig

RECORD_COLUMNS = ("week", "sex", "age_group", "race", "county", "result")
POSTSTRAT_COLUMNS = ("sex", "age_group", "race", "county", "count")
CALIBRATION_COLUMNS = ("kind", "y", "n")
DEFAULT_SWEEP = (0.70, 0.65, 0.60, 0.55)


class IngestError(ValueError):
    """Malformed or invalid input file."""


# ---------------------------------------------------------------------------
# Week numbering
# ---------------------------------------------------------------------------


def _week_of_year(d: dt.date) -> int:
    # Monday-start weeks; week 1 is the (possibly partial) week holding Jan 1
    jan1 = dt.date(d.year, 1, 1)
    return (d.timetuple().tm_yday - 1 + jan1.weekday()) // 7 + 1


def week_index(date: dt.date | str, origin_year: int = 2020) -> int:
    """Running week index counted from the first week of ``origin_year``.

    Weeks start on Monday and restart at each January 1st, so the turn of
    the year splits a calendar week in two: 2020-12-28..31 is week 53 and
    2021-01-01..03 is week 54. 2020-04-28 maps to 18 and 2021-02-08 to 60.
    """
    if isinstance(date, str):
        date = dt.date.fromisoformat(date.strip())
    if date.year < origin_year:
        raise ValueError(f"{date} precedes the week origin year {origin_year}")
    offset = sum(_week_of_year(dt.date(y, 12, 31)) for y in range(origin_year, date.year))
    return offset + _week_of_year(date)


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def _open_rows(path, columns):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    fh = path.open(newline="", encoding="utf-8-sig")
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        fh.close()
        raise IngestError(f"{path}: file is empty; expected header {','.join(columns)}")
    header = tuple(h.strip() for h in header)
    if header != columns:
        fh.close()
        raise IngestError(
            f"{path}: header {','.join(header)!r} does not match expected {','.join(columns)!r}"
        )
    return fh, reader


def _rows(path, columns):
    """Yield (line number, stripped fields) for each nonblank data row."""
    fh, reader = _open_rows(path, columns)
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(columns):
                raise IngestError(
                    f"{path}: row {lineno}: expected {len(columns)} fields, got {len(row)}"
                )
            yield lineno, [v.strip() for v in row]


def _int_field(path, lineno, name, value, minimum=None):
    try:
        out = int(value)
    except ValueError:
        raise IngestError(f"{path}: row {lineno}: field {name!r} is not an integer: {value!r}")
    if minimum is not None and out < minimum:
        raise IngestError(f"{path}: row {lineno}: field {name!r} must be >= {minimum}, got {out}")
    return out


def _demographics(path, lineno, values) -> Demographics:
    levels = []
    for name, value in zip(FIELDS, values):
        try:
            levels.append(normalize_level(name, value))
        except LevelError as exc:
            raise IngestError(f"{path}: row {lineno}: {exc}") from None
    return Demographics(*levels)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Test records
# ---------------------------------------------------------------------------


def load_records(path, weeks: Sequence[int] | None = None,
                 origin_year: int = 2020) -> list[TestRecord]:
    """Person-level test results; duplicate rows are distinct patients."""
    allowed = set(weeks) if weeks is not None else None
    records = []
    for lineno, row in _rows(path, RECORD_COLUMNS):
        raw_week = row[0]
        if "-" in raw_week[1:]:
            try:
                week = week_index(raw_week, origin_year)
            except ValueError as exc:
                raise IngestError(f"{path}: row {lineno}: field 'week': {exc}") from None
        else:
            week = _int_field(path, lineno, "week", raw_week)
        if allowed is not None and week not in allowed:
            raise IngestError(
                f"{path}: row {lineno}: week {week} outside study range "
                f"{min(allowed)}-{max(allowed)}"
            )
        cell = _demographics(path, lineno, row[1:5])
        if row[5] not in ("0", "1"):
            raise IngestError(f"{path}: row {lineno}: field 'result' must be 0 or 1, got {row[5]!r}")
        records.append(TestRecord(week, cell, int(row[5])))
    return records


def write_records(records: Iterable[TestRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            d = r.demographics
            w.writerow([r.week, d.sex, d.age_group, d.race, d.county, r.result])
    return path


# ---------------------------------------------------------------------------
# Population tables
# ---------------------------------------------------------------------------


def load_poststrat(path, population_name: str | None = None) -> PoststratTable:
    path = Path(path)
    counts: dict[Demographics, int] = {}
    for lineno, row in _rows(path, POSTSTRAT_COLUMNS):
        cell = _demographics(path, lineno, row[:4])
        if cell in counts:
            raise IngestError(
                f"{path}: row {lineno}: duplicate cell "
                f"{cell.sex},{cell.age_group},{cell.race},{cell.county}"
            )
        counts[cell] = _int_field(path, lineno, "count", row[4], minimum=0)
    missing = [c for c in ALL_CELLS if c not in counts]
    if missing:
        listed = "; ".join(f"{c.sex},{c.age_group},{c.race},{c.county}" for c in missing)
        raise IngestError(f"{path}: missing {len(missing)} cell(s): {listed}")
    try:
        return PoststratTable.from_mapping(population_name or path.stem, counts)
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from None


def write_poststrat(table: PoststratTable, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSTSTRAT_COLUMNS)
        for cell, n in zip(ALL_CELLS, table.counts):
            w.writerow([cell.sex, cell.age_group, cell.race, cell.county, int(n)])
    return path


# ---------------------------------------------------------------------------
# Calibration data
# ---------------------------------------------------------------------------


def load_calibration(path) -> CalibrationData:
    spec, sens = [], []
    for lineno, row in _rows(path, CALIBRATION_COLUMNS):
        kind = row[0].lower()
        if kind not in ("sensitivity", "specificity"):
            raise IngestError(
                f"{path}: row {lineno}: kind must be 'sensitivity' or 'specificity', got {row[0]!r}"
            )
        y = _int_field(path, lineno, "y", row[1], minimum=0)
        n = _int_field(path, lineno, "n", row[2], minimum=0)
        if y > n:
            raise IngestError(f"{path}: row {lineno}: y={y} exceeds n={n}")
        (sens if kind == "sensitivity" else spec).append((y, n))
    return CalibrationData(tuple(spec), tuple(sens))


def write_calibration(calibration: CalibrationData, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CALIBRATION_COLUMNS)
        for y, n in calibration.sensitivity_trials:
            w.writerow(["sensitivity", y, n])
        for y, n in calibration.specificity_trials:
            w.writerow(["specificity", y, n])
    return path


def bundled_path(name: str) -> Path:
    """Path of a data file shipped with the package (e.g. ``calibration.csv``)."""
    return Path(str(resources.files("hospmrp") / "data" / name))


def default_calibration() -> CalibrationData:
    return load_calibration(bundled_path("calibration.csv"))


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {
    "records", "calibration", "poststrat", "output_dir", "week_start", "week_end",
    "week_origin_year", "sensitivity_sweep", "metric_series", "sampler", "model",
}
_SAMPLER_KEYS = set(SamplerConfig.__dataclass_fields__)
_MODEL_KEYS = {"beta_sd", "centered"}


@dataclass
class RunConfig:
    """Declarative pipeline settings, usually read from a TOML file.

    Keys (top level): ``records``, ``calibration`` (optional; bundled
    default otherwise), ``output_dir``, ``week_start``, ``week_end``,
    ``week_origin_year``, ``sensitivity_sweep``, ``metric_series`` (list of
    paths). Tables: ``[poststrat]`` mapping population name to table path,
    ``[sampler]`` with :class:`SamplerConfig` fields, ``[model]`` with
    ``beta_sd`` and ``centered`` (list of group names).
    """

    records: Path | None = None
    calibration: Path | None = None
    poststrat: dict = field(default_factory=dict)
    output_dir: Path = Path("out")
    week_start: int = 18
    week_end: int = 60
    week_origin_year: int = 2020
    sensitivity_sweep: tuple = DEFAULT_SWEEP
    metric_series: tuple = ()
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    beta_sd: float = 2.5
    centered: tuple | None = None

    def __post_init__(self):
        if self.week_end < self.week_start:
            raise ValueError(f"empty week range {self.week_start}-{self.week_end}")
        for s in self.sensitivity_sweep:
            if not 0.0 < s <= 1.0:
                raise ValueError(f"sensitivity sweep value {s} outside (0, 1]")

    @property
    def weeks(self) -> range:
        return range(self.week_start, self.week_end + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("records", "calibration", "output_dir"):
            d[k] = None if d[k] is None else str(d[k])
        d["poststrat"] = {k: str(v) for k, v in self.poststrat.items()}
        d["metric_series"] = [str(p) for p in self.metric_series]
        d["sensitivity_sweep"] = list(self.sensitivity_sweep)
        return d


def _reject_unknown(keys, allowed, where):
    unknown = sorted(set(keys) - allowed)
    if unknown:
        raise IngestError(f"unknown config key(s) in {where}: {', '.join(unknown)}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise IngestError(f"{path}: {exc}") from None
    return config_from_dict(raw, base=path.parent, where=str(path))


def config_from_dict(raw: dict, base: Path | None = None, where: str = "config") -> RunConfig:
    base = Path(base or ".")
    _reject_unknown(raw, _TOP_KEYS, where)
    sampler_raw = raw.get("sampler", {})
    _reject_unknown(sampler_raw, _SAMPLER_KEYS, f"{where} [sampler]")
    model_raw = raw.get("model", {})
    _reject_unknown(model_raw, _MODEL_KEYS, f"{where} [model]")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        return RunConfig(
            records=resolve(raw["records"]) if "records" in raw else None,
            calibration=resolve(raw["calibration"]) if "calibration" in raw else None,
            poststrat={k: resolve(v) for k, v in raw.get("poststrat", {}).items()},
            output_dir=resolve(raw.get("output_dir", "out")),
            week_start=int(raw.get("week_start", 18)),
            week_end=int(raw.get("week_end", 60)),
            week_origin_year=int(raw.get("week_origin_year", 2020)),
            sensitivity_sweep=tuple(float(s) for s in raw.get("sensitivity_sweep", DEFAULT_SWEEP)),
            metric_series=tuple(resolve(p) for p in raw.get("metric_series", ())),
            sampler=SamplerConfig(**sampler_raw),
            beta_sd=float(model_raw.get("beta_sd", 2.5)),
            centered=tuple(model_raw["centered"]) if "centered" in model_raw else None,
        )
    except (TypeError, ValueError) as exc:
        raise IngestError(f"{where}: {exc}") from None
