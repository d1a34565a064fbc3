"""Command-line pipeline: simulate -> fit -> poststratify -> ppc -> compare, plus sweep.

Every command reads its inputs from disk and writes plot-ready CSV files to
the output directory, so stages can be run separately and composed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import summarize
from .ingest import (
    IngestError,
    RunConfig,
    bundled_path,
    file_sha256,
    load_calibration,
    load_config,
    load_poststrat,
    load_records,
    write_calibration,
    write_poststrat,
    write_records,
)
from .metrics import (
    MetricSeries,
    lead_lag,
    load_metric_series,
    peak_week,
    posterior_predictive_check,
    sensitivity_sweep,
    write_metric_series,
)
from .model import DEFAULT_CENTERED, CalibrationData, HierarchicalModel, Layout
from .poststrat import (
    SERIES_COLUMNS,
    as_counts,
    poststratify,
    raw_weekly_positivity,
    read_series_csv,
    write_series_csv,
)
from .sampler import PosteriorDraws, sample
from .synthgen import default_scenario, generate, true_prevalence

logger = logging.getLogger("hospmrp")

DRAWS_FILE = "draws.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
MANIFEST_FILE = "manifest.json"
PREVALENCE_FILE = "prevalence.csv"
PPC_FILE = "ppc.csv"
COMPARISON_FILE = "comparison.csv"
SUMMARY_FILE = "comparison.txt"
SWEEP_FILE = "sweep.csv"


# ---------------------------------------------------------------------------
# Draw files
# ---------------------------------------------------------------------------


def write_draws(draws: PosteriorDraws, path) -> Path:
    """Wide format: ``chain,iteration,<parameter>...``, one row per draw."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", *draws.names])
        for c in range(draws.chains):
            for i in range(draws.iterations):
                w.writerow([c, i, *(repr(float(v)) for v in draws.values[c, i])])
    return path


def read_draws(path) -> PosteriorDraws:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"draws file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    names = header[2:]
    weeks = [int(n[len("alpha_time["):-1]) for n in names if n.startswith("alpha_time[")]
    layout = Layout(weeks)
    if layout.names != names:
        raise ValueError(f"{path}: columns do not match the model parameter layout")
    chains = sorted({int(r[0]) for r in rows})
    values = np.array([[float(v) for v in r[2:]] for r in rows])
    values = values.reshape(len(chains), -1, len(names))
    return PosteriorDraws(values=values, names=names, layout=layout)


def write_diagnostics(draws: PosteriorDraws, path) -> Path:
    path = Path(path)
    diag = summarize(draws.values, draws.names) if draws.chains >= 2 else {}
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "rhat", "ess", "degenerate"])
        for name in draws.names:
            d = diag.get(name)
            if d is None:
                w.writerow([name, "", "", ""])
            else:
                w.writerow([name, repr(d.rhat), repr(d.ess), int(d.degenerate)])
        w.writerow([])
        w.writerow(["chain", "divergences", "step_size"])
        for c in range(draws.chains):
            w.writerow([c, int(draws.divergences[c]), repr(float(draws.step_sizes[c]))])
    return path


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.sampler = replace(cfg.sampler, seed=args.seed)
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    if getattr(args, "records", None):
        cfg.records = Path(args.records)
    if getattr(args, "calibration", None):
        cfg.calibration = Path(args.calibration)
    for spec in getattr(args, "poststrat", None) or ():
        name, _, p = spec.partition("=")
        if not p:
            raise IngestError(f"--poststrat expects NAME=PATH, got {spec!r}")
        cfg.poststrat[name] = Path(p)
    for p in getattr(args, "metrics", None) or ():
        cfg.metric_series = (*cfg.metric_series, Path(p))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _records(cfg: RunConfig):
    if cfg.records is None:
        raise IngestError("no records file given (config key 'records' or --records)")
    return load_records(cfg.records, cfg.weeks, cfg.week_origin_year)


def _calibration(cfg: RunConfig) -> CalibrationData:
    return load_calibration(cfg.calibration or bundled_path("calibration.csv"))


def _tables(cfg: RunConfig):
    if not cfg.poststrat:
        raise IngestError("no poststratification tables given (config [poststrat] or --poststrat)")
    return [load_poststrat(p, name) for name, p in cfg.poststrat.items()]


def _model_kw(cfg: RunConfig) -> dict:
    return {
        "beta_sd": cfg.beta_sd,
        "centered": DEFAULT_CENTERED if cfg.centered is None else cfg.centered,
    }


def _draws_path(args, out: Path) -> Path:
    return Path(args.draws) if getattr(args, "draws", None) else out / DRAWS_FILE


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    """Write a synthetic scenario: records, tables, calibration, truth, metrics, config."""
    out = Path(args.out or "scenario")
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    sc = default_scenario(seed=seed)
    records = generate(sc.truth, sc.design, seed)
    write_records(records, out / "records.csv")
    write_poststrat(sc.hospital, out / "hospital.csv")
    write_poststrat(sc.community, out / "community.csv")
    write_calibration(CalibrationData.default(), out / "calibration.csv")

    weeks = list(sc.weeks)
    truth_comm = true_prevalence(sc.truth, sc.community)
    truth_hosp = true_prevalence(sc.truth, sc.hospital)
    with (out / "truth.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["week", "alpha_time", "prevalence_hospital", "prevalence_community"])
        for k, wk in enumerate(weeks):
            w.writerow([wk, repr(float(sc.truth.alpha_time[k])), repr(float(truth_hosp[k])),
                        repr(float(truth_comm[k]))])

    # clinical-burden stand-ins that trail community prevalence by one week
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xC0,)))
    lagged = np.concatenate([[truth_comm[0]], truth_comm[:-1]])
    hosp = 60.0 * lagged / truth_comm.max() + rng.normal(0.0, 0.5, lagged.size)
    ed = 400.0 * lagged / truth_comm.max() + rng.normal(0.0, 3.0, lagged.size)
    write_metric_series(
        [MetricSeries("hospitalizations", tuple(weeks), np.round(hosp, 1), "patients"),
         MetricSeries("ed_visits", tuple(weeks), np.round(ed, 0), "visits")],
        out / "metrics.csv",
    )
    (out / "config.toml").write_text(
        'records = "records.csv"\n'
        'calibration = "calibration.csv"\n'
        'output_dir = "out"\n'
        f"week_start = {weeks[0]}\n"
        f"week_end = {weeks[-1]}\n"
        'metric_series = ["metrics.csv"]\n'
        "sensitivity_sweep = [0.70, 0.65, 0.60, 0.55]\n\n"
        "[poststrat]\n"
        'hospital = "hospital.csv"\n'
        'community = "community.csv"\n\n'
        "[sampler]\n"
        "chains = 4\n"
        "warmup_iterations = 1000\n"
        "sampling_iterations = 1000\n"
        f"seed = {seed}\n",
        encoding="utf-8",
    )
    print(f"wrote synthetic scenario ({len(records)} tests) to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    records = _records(cfg)
    calibration = _calibration(cfg)
    for p in cfg.poststrat.values():
        if not Path(p).is_file():
            raise FileNotFoundError(f"poststratification file not found: {p}")
    out = _out_dir(cfg)
    model = HierarchicalModel(as_counts(records), calibration, cfg.weeks, **_model_kw(cfg))
    draws = sample(model, cfg.sampler)
    write_draws(draws, out / DRAWS_FILE)
    write_diagnostics(draws, out / DIAGNOSTICS_FILE)

    inputs = {"records": cfg.records, "calibration": cfg.calibration or bundled_path("calibration.csv")}
    inputs.update({f"poststrat:{k}": v for k, v in cfg.poststrat.items()})
    # paths relative to the output directory keep the manifest relocatable
    def rel(p):
        return None if p is None else Path(os.path.relpath(Path(p).resolve(), out.resolve()))

    portable = replace(
        cfg,
        records=rel(cfg.records), calibration=rel(cfg.calibration), output_dir=Path("."),
        poststrat={k: rel(v) for k, v in cfg.poststrat.items()},
        metric_series=tuple(rel(p) for p in cfg.metric_series),
    )
    manifest = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg.sampler.seed,
        "config": portable.to_dict(),
        "inputs": {k: {"path": str(rel(v)), "sha256": file_sha256(v)} for k, v in inputs.items()},
        "divergences": [int(d) for d in draws.divergences],
        "warnings": draws.warnings,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    bad = [n for n, d in draws.diagnostics.items() if not d.degenerate and d.rhat > 1.05]
    print(f"fit {len(draws)} draws; divergences per chain {draws.divergences.tolist()}")
    if bad:
        print(f"warning: R-hat > 1.05 for {len(bad)} parameter(s): {', '.join(bad[:5])}")
    return 0


def cmd_poststratify(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    draws = read_draws(_draws_path(args, out))
    series = [poststratify(draws, t) for t in _tables(cfg)]
    path = write_series_csv(series, out / PREVALENCE_FILE)
    print(f"wrote {len(series)} prevalence series to {path}")
    return 0


def cmd_ppc(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    draws = read_draws(_draws_path(args, out))
    check = posterior_predictive_check(draws, _records(cfg), seed=cfg.sampler.seed)
    with (out / PPC_FILE).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["week", "tests", "observed", "lower", "upper", "covered"])
        for k, wk in enumerate(check.weeks):
            if check.missing[k]:
                w.writerow([wk, 0, "", "", "", ""])
            else:
                w.writerow([wk, int(check.tests[k]), repr(float(check.observed[k])),
                            repr(float(check.lower[k])), repr(float(check.upper[k])),
                            int(check.covered[k])])
    print(f"posterior predictive coverage {check.coverage:.3f} over observed weeks")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    prev_path = Path(args.prevalence) if args.prevalence else out / PREVALENCE_FILE
    if not prev_path.is_file():
        raise FileNotFoundError(f"prevalence file not found: {prev_path}")
    mrp = [MetricSeries.from_prevalence(s) for s in read_series_csv(prev_path)]
    raw = raw_weekly_positivity(_records(cfg), cfg.weeks)
    others = [
        MetricSeries("positivity_rate", raw.weeks, raw.rate, "proportion"),
        MetricSeries("positive_cases", raw.weeks, raw.positives.astype(float), "tests"),
    ]
    for p in cfg.metric_series:
        others.extend(load_metric_series(p))

    window, max_lag = args.window, args.max_lag
    rows = []
    lines = ["Peak weeks (centered moving average, window %d):" % window]
    for s in mrp + others:
        pk = peak_week(s, window)
        lines.append(f"  {s.name}: week {pk}")
        rows.append((s.name, "peak", "", pk, ""))
    lines.append(f"Lead-lag of week-over-week changes (max lag {max_lag}; positive = MRP leads):")
    for a in mrp:
        for b in others:
            res = lead_lag(a, b, max_lag=max_lag)
            lines.append(f"  {a.name} vs {b.name}: best lag {res.best_lag:+d} "
                         f"(r = {res.best_correlation:.3f})")
            rows.append((a.name, "lead_lag", b.name, res.best_lag, repr(res.best_correlation)))
    with (out / COMPARISON_FILE).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "measure", "reference", "week_or_lag", "correlation"])
        w.writerows(rows)
    text = "\n".join(lines) + "\n"
    (out / SUMMARY_FILE).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    values = tuple(args.values) if args.values else cfg.sensitivity_sweep
    result = sensitivity_sweep(
        _records(cfg), cfg.weeks, _tables(cfg), values,
        calibration=_calibration(cfg), config=cfg.sampler, **_model_kw(cfg),
    )
    with (out / SWEEP_FILE).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensitivity", *SERIES_COLUMNS])
        for s, series_list in result.items():
            for series in series_list:
                for row in series.rows():
                    w.writerow([repr(float(s)), row[0], row[1],
                                *(repr(float(v)) for v in row[2:])])
    print(f"wrote {sum(len(v) for v in result.values())} series for sensitivity values "
          f"{', '.join(f'{s:.2f}' for s in result)} to {out / SWEEP_FILE}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hospmrp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, records=True):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if records:
            p.add_argument("--records", help="test records CSV")
        return p

    p = sub.add_parser("simulate", help="write a synthetic scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="scenario directory (default ./scenario)")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("fit", help="sample the posterior"))
    p.add_argument("--calibration")
    p.add_argument("--poststrat", action="append", metavar="NAME=PATH")
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser("poststratify", help="weekly prevalence per population"), False)
    p.add_argument("--draws")
    p.add_argument("--poststrat", action="append", metavar="NAME=PATH")
    p.set_defaults(func=cmd_poststratify)

    p = common(sub.add_parser("ppc", help="posterior predictive check"))
    p.add_argument("--draws")
    p.set_defaults(func=cmd_ppc)

    p = common(sub.add_parser("compare", help="peaks and lead-lag against other metrics"))
    p.add_argument("--prevalence")
    p.add_argument("--metrics", action="append", metavar="PATH")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--max-lag", type=int, default=4)
    p.set_defaults(func=cmd_compare)

    p = common(sub.add_parser("sweep", help="refit under alternative prior sensitivities"))
    p.add_argument("--calibration")
    p.add_argument("--poststrat", action="append", metavar="NAME=PATH")
    p.add_argument("--values", type=float, nargs="+")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
