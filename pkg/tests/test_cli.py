import csv
import json

import pytest

from hospmrp.cli import main, read_draws, write_draws

FAST = "[sampler]\nchains = 2\nwarmup_iterations = 150\nsampling_iterations = 50\nseed = 3\n"


def _fast_config(scenario_dir):
    cfg = scenario_dir / "config.toml"
    text = cfg.read_text().split("[sampler]")[0]
    cfg.write_text(text + FAST)
    return cfg


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scen = root / "scenario"
    assert main(["simulate", "--out", str(scen), "--seed", "2"]) == 0
    cfg = _fast_config(scen)
    assert main(["fit", "--config", str(cfg)]) == 0
    assert main(["poststratify", "--config", str(cfg)]) == 0
    assert main(["ppc", "--config", str(cfg)]) == 0
    assert main(["compare", "--config", str(cfg)]) == 0
    return scen


def test_simulate_writes_all_inputs(pipeline):
    for name in ("records.csv", "hospital.csv", "community.csv", "calibration.csv",
                 "truth.csv", "metrics.csv", "config.toml"):
        assert (pipeline / name).is_file()


def test_fit_outputs(pipeline):
    out = pipeline / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert set(manifest["inputs"]) == {"records", "calibration", "poststrat:hospital",
                                       "poststrat:community"}
    assert all(len(v["sha256"]) == 64 for v in manifest["inputs"].values())
    assert manifest["inputs"]["records"]["path"] == "../records.csv"
    draws = read_draws(out / "draws.csv")
    assert draws.values.shape[:2] == (2, 50)
    header = (out / "diagnostics.csv").read_text().splitlines()[0]
    assert header == "parameter,rhat,ess,degenerate"


def test_draws_file_roundtrip(pipeline, tmp_path):
    draws = read_draws(pipeline / "out" / "draws.csv")
    copy = write_draws(draws, tmp_path / "d.csv")
    assert copy.read_bytes() == (pipeline / "out" / "draws.csv").read_bytes()


def test_poststratify_emits_two_series(pipeline):
    with (pipeline / "out" / "prevalence.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["population"] for r in rows} == {"hospital", "community"}
    assert len(rows) == 2 * 43


def test_ppc_report(pipeline):
    with (pipeline / "out" / "ppc.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 43 and all(r["covered"] in ("0", "1") for r in rows)


def test_compare_names_best_lag(pipeline):
    text = (pipeline / "out" / "comparison.txt").read_text()
    assert "best lag" in text and "Peak weeks" in text
    with (pipeline / "out" / "comparison.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert any(r["measure"] == "lead_lag" and r["reference"] == "hospitalizations" for r in rows)


def test_rerun_is_identical(pipeline, tmp_path):
    cfg = pipeline / "config.toml"
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("draws.csv", "diagnostics.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline / "out" / name).read_bytes()


def test_sweep_default_emits_four_series(pipeline, tmp_path):
    cfg = pipeline / "config.toml"
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path),
                 "--poststrat", f"hospital={pipeline / 'hospital.csv'}"]) == 0
    with (tmp_path / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert sorted({float(r["sensitivity"]) for r in rows}) == [0.55, 0.6, 0.65, 0.7]
    assert len(rows) == 4 * 2 * 43


def test_missing_poststrat_file_fails_with_path(pipeline, tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    code = main(["fit", "--config", str(pipeline / "config.toml"), "--out", str(tmp_path),
                 "--poststrat", f"hospital={missing}"])
    assert code != 0
    assert str(missing) in capsys.readouterr().err


def test_invalid_records_fail_cleanly(tmp_path, capsys):
    bad = tmp_path / "r.csv"
    bad.write_text("week,sex,age_group,race,county,result\n18,female,90+,white,Lake,0\n")
    code = main(["fit", "--records", str(bad), "--out", str(tmp_path)])
    assert code != 0
    assert "row 2" in capsys.readouterr().err
