from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from builders import WORKED_EXAMPLE, TraceBuilder
from coordcascade.cli import main
from coordcascade.errors import ConfigError
from coordcascade.pipeline import PipelineConfig, analyze, load_bundles
from coordcascade.sim.engine import SimConfig, run_simulation
from coordcascade.trace import write_trace


def _run(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def _rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _sweep_config(tmp_path: Path, name: str, sweep: dict, **extra) -> Path:
    p = tmp_path / name
    p.write_text(json.dumps({"sweep": sweep, **extra}))
    return p


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def test_validate_exit_codes(tmp_path):
    r = _run("validate", "--input", WORKED_EXAMPLE, "--out", tmp_path / "v.json")
    assert r.exit_code == 0
    assert json.loads((tmp_path / "v.json").read_text())["ok"] is True

    bad = tmp_path / "bad.jsonl"
    write_trace(TraceBuilder().propose("c1").revise("c2", "c2").bundle(), bad)
    r = _run("validate", "--input", bad, "--out", tmp_path / "bad.json")
    assert r.exit_code == 1
    assert "self_parent" in r.output
    assert not json.loads((tmp_path / "bad.json").read_text())["ok"]

    r = _run("validate", "--input", tmp_path / "nope.jsonl")
    assert r.exit_code == 2


def test_validate_empty_file_is_a_data_violation(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert _run("validate", "--input", p).exit_code == 1


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def test_analyze_worked_example(tmp_path):
    r = _run("analyze", "--input", WORKED_EXAMPLE, "--out", tmp_path / "a")
    assert r.exit_code == 0
    tce = _rows(tmp_path / "a" / "tce.csv")
    assert [int(t["x"]) for t in tce] == [5]
    summary = {row["observable"]: row for row in _rows(tmp_path / "a" / "summary.csv")}
    assert all(row["status"].startswith("insufficient") for row in summary.values())
    for name in ("fits.json", "scaling.json", "attachment.json", "concentration.csv", "cascades.csv"):
        assert (tmp_path / "a" / name).exists()


def test_analyze_fixed_xmin(tmp_path):
    trace = tmp_path / "sim.jsonl"
    write_trace(run_simulation(SimConfig(N=32, seed=0)), trace)
    r = _run("analyze", "--input", trace, "--out", tmp_path / "a", "--xmin", "8")
    assert r.exit_code == 0
    summary = {row["observable"]: row for row in _rows(tmp_path / "a" / "summary.csv")}
    assert summary["tce"]["status"] == "ok"
    assert all(row["x_min"] == "8" for row in summary.values() if row["status"] == "ok")
    fits = json.loads((tmp_path / "a" / "fits.json").read_text())["tce"]["fits"]
    assert {f["x_min"] for f in fits.values()} == {8}


def test_analyze_refuses_invalid_input_and_bad_flags(tmp_path):
    bad = tmp_path / "bad.jsonl"
    write_trace(TraceBuilder().propose("c1").revise("c2", "c2").bundle(), bad)
    assert _run("analyze", "--input", bad, "--out", tmp_path / "a").exit_code == 1
    assert _run("analyze", "--input", WORKED_EXAMPLE, "--out", tmp_path / "b", "--xmin", "0").exit_code == 2
    assert _run("analyze", "--input", WORKED_EXAMPLE, "--out", tmp_path / "c", "--tau", "0").exit_code == 2
    assert _run("analyze", "--input", WORKED_EXAMPLE).exit_code == 2


def test_pipeline_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"colour": 1})
    p = tmp_path / "c.json"
    p.write_text("{broken")
    assert _run("analyze", "--config", p, "--out", tmp_path / "o").exit_code == 2


# ---------------------------------------------------------------------------
# simulate, dti, report
# ---------------------------------------------------------------------------


def test_simulate_two_seeds(tmp_path):
    cfg = _sweep_config(tmp_path, "s.json", {"base": {"N": 8}, "grid": {"seed": [0, 1]}})
    r = _run("simulate", "--config", cfg, "--out", tmp_path / "sim")
    assert r.exit_code == 0
    assert len(_rows(tmp_path / "sim" / "index.csv")) == 2
    assert len(list((tmp_path / "sim").glob("*.jsonl"))) == 2


def test_simulate_config_error_writes_nothing(tmp_path):
    cfg = _sweep_config(tmp_path, "s.json", {"base": {"N": 8}, "grid": {"seed": [0], "N": [8, 1]}})
    r = _run("simulate", "--config", cfg, "--out", tmp_path / "sim")
    assert r.exit_code == 2
    assert not (tmp_path / "sim" / "index.csv").exists()


def test_dti_calibrate_and_disabled_run(tmp_path):
    base = _sweep_config(tmp_path, "b.json", {"base": {"N": 16}, "grid": {"seed": [100, 101, 102]}})
    assert _run("simulate", "--config", base, "--out", tmp_path / "base").exit_code == 0
    r = _run("dti-calibrate", "--input", tmp_path / "base", "--out", tmp_path / "cal.json")
    assert r.exit_code == 0
    assert "fully_connected/reasoning" in json.loads((tmp_path / "cal.json").read_text())

    treat = _sweep_config(tmp_path, "t.json", {"base": {"N": 16}, "grid": {"seed": [0, 1]}})
    r = _run("dti-run", "--config", treat, "--calibration", tmp_path / "cal.json", "--out", tmp_path / "dti",
             "--delta-override", "inf")
    assert r.exit_code == 0
    assert "0 triggers" in r.output
    runs = _rows(tmp_path / "dti" / "runs.csv")
    assert [row["triggers"] for row in runs] == ["0", "0"]
    assert all(row["identical"] == "True" for row in runs)
    for f in (tmp_path / "dti" / "baseline").glob("*.jsonl"):
        assert f.read_bytes() == (tmp_path / "dti" / "treated" / f.name).read_bytes()
    doc = json.loads((tmp_path / "dti" / "intervention.json").read_text())
    assert doc["treated"]["n_triggers"] == 0


def test_dti_run_requires_calibration(tmp_path):
    cfg = _sweep_config(tmp_path, "t.json", {"base": {"N": 8}})
    assert _run("dti-run", "--config", cfg, "--out", tmp_path / "d").exit_code == 2


def test_report_fits_scaling_from_three_sizes(tmp_path):
    dirs = []
    for N in (8, 32, 128):
        cfg = _sweep_config(tmp_path, f"s{N}.json", {"base": {"N": N}, "grid": {"seed": [0, 1, 2]}})
        assert _run("simulate", "--config", cfg, "--out", tmp_path / f"sim{N}").exit_code == 0
        assert _run("analyze", "--input", tmp_path / f"sim{N}", "--out", tmp_path / f"an{N}").exit_code == 0
        dirs += ["--input", tmp_path / f"an{N}"]
    r = _run("report", *dirs, "--out", tmp_path / "rep")
    assert r.exit_code == 0
    scaling = json.loads((tmp_path / "rep" / "scaling.json").read_text())["tce"]
    assert scaling["status"] == "ok"
    assert [p["N"] for p in scaling["per_n"]] == [8, 32, 128]
    xmax = [row for row in _rows(tmp_path / "rep" / "xmax_vs_n.csv") if row["observable"] == "tce"]
    assert [int(row["runs"]) for row in xmax] == [3, 3, 3]
    assert _run("report", "--input", tmp_path / "nothing", "--out", tmp_path / "r2").exit_code == 2


# ---------------------------------------------------------------------------
# idempotence
# ---------------------------------------------------------------------------


def test_commands_are_idempotent(tmp_path):
    cfg = _sweep_config(tmp_path, "s.json", {"base": {"N": 16}, "grid": {"seed": [0, 1]}})
    for k in ("x", "y"):
        assert _run("simulate", "--config", cfg, "--out", tmp_path / f"sim_{k}").exit_code == 0
        assert _run("analyze", "--input", tmp_path / f"sim_{k}", "--out", tmp_path / f"an_{k}",
                    "--bootstrap", "5", "--seed", "3").exit_code == 0
    assert _tree_bytes(tmp_path / "sim_x") == _tree_bytes(tmp_path / "sim_y")
    assert _tree_bytes(tmp_path / "an_x") == _tree_bytes(tmp_path / "an_y")


def test_library_analyze_matches_cli(tmp_path):
    trace = tmp_path / "t.jsonl"
    write_trace(run_simulation(SimConfig(N=16, seed=2)), trace)
    assert _run("analyze", "--input", trace, "--out", tmp_path / "cli").exit_code == 0
    analyze(load_bundles([trace]), tmp_path / "lib")
    assert _tree_bytes(tmp_path / "cli") == _tree_bytes(tmp_path / "lib")
