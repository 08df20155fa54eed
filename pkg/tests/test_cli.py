import json
from pathlib import Path

import numpy as np
import pytest

from lightcone.cli import main, sweep_values, thread_count, with_axis
from lightcone.config import ConfigValidationError, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

QUICK = """\
experiment: state_leakage
grid: {extent: 40.0, points: 256}
cutoff: {lower: -0.5, upper: 0.5, width: 0.25}
frame: {c: 1.5, a: 9.0, b: 6.0}
time: {dt: 0.02, t_min: 2.0, t_max: 12.0, num: 6}
fit: {target: -0.1}
params: {boundary_threshold: 1.0}
"""


@pytest.fixture
def quick(tmp_path):
    p = tmp_path / "quick.yaml"
    p.write_text(QUICK)
    return p


def test_run_writes_manifest_and_outputs(quick, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["--no-fail-exit", "run", str(quick), "--out", str(out)])
    assert code == 0
    m = json.loads((out / "manifest.json").read_text())
    assert set(m) >= {"config_hash", "artifact_version", "wall_clock_s", "verdicts", "outputs"}
    for f in m["outputs"]:
        assert (out / f).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["grid"]["points"] == 256
    rows = np.loadtxt(out / "state.dat")
    assert rows.shape == (6, 2)
    assert main(["report", str(out / "manifest.json")]) == 0
    assert "overall" in capsys.readouterr().out


def test_exit_code_tracks_verdict(quick, tmp_path):
    strict = quick.read_text().replace("target: -0.1", "target: -10.0")
    quick.write_text(strict)
    assert main(["run", str(quick), "--out", str(tmp_path / "a")]) == 1
    assert main(["--no-fail-exit", "run", str(quick), "--out", str(tmp_path / "b")]) == 0


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("frame: {a: 2.0, b: 5.0}\n")
    assert main(["run", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "b<a required" in capsys.readouterr().err


def test_fit_subcommand(tmp_path, capsys):
    t = np.geomspace(4, 64, 8)
    p = tmp_path / "curve.csv"
    np.savetxt(p, np.column_stack([t, 3 * t**-2.0]), delimiter=",", header="t,value", comments="")
    assert main(["fit", str(p), "--target", "-2", "--tol", "0.01"]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert fit["exponent"] == pytest.approx(-2.0)
    assert main(["fit", str(p), "--target", "-3"]) == 1


def test_sweep_is_deterministic_across_workers(quick, tmp_path):
    args = ["--no-fail-exit", "sweep", str(quick), "--axis", "c", "--values", "1.2", "2.0"]
    assert main(["--threads", "1"] + args + ["--out", str(tmp_path / "serial")]) == 0
    assert main(["--threads", "2"] + args + ["--out", str(tmp_path / "pool")]) == 0
    for name in ("sweep.csv", "c_000/state.csv", "c_001/state.csv"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pool" / name).read_bytes()


def test_sweep_manifest_indexes_children(quick, tmp_path):
    out = tmp_path / "sw"
    main(["--threads", "1", "--no-fail-exit", "sweep", str(quick), "--axis", "c", "--values", "1.2", "2.0",
          "--out", str(out)])
    listed = json.loads((out / "manifest.json").read_text())["outputs"]
    assert "sweep.csv" in listed
    for child in ("c_000", "c_001"):
        assert any(o.startswith(child + "/") for o in listed)
        assert (out / child / "manifest.json").exists()
    assert all((out / o).exists() for o in listed)


def test_sweep_without_values_is_usage_error(quick):
    assert main(["sweep", str(quick), "--axis", "c", "--values"]) == 2
    with pytest.raises(ConfigValidationError):
        sweep_values(parse_config(quick), "c", [])


def test_sweep_values_and_axes(quick):
    cfg = parse_config(quick)
    vals = sweep_values(cfg, "c", ["0.5k", "2k", "1.5"])
    assert vals[0] == pytest.approx(0.5 * cfg.k) and vals[2] == 1.5
    assert with_axis(cfg, "delta_g", 0.1).cutoff.width == 0.1
    assert with_axis(cfg, "a", 12.0).frame.a == 12.0
    with pytest.raises(ConfigValidationError):
        with_axis(cfg, "mu", 3.0)


def test_thread_env_override(monkeypatch):
    monkeypatch.setenv("LIGHTCONE_THREADS", "3")
    assert thread_count(8) == 3
    monkeypatch.delenv("LIGHTCONE_THREADS")
    assert thread_count(5) == 5


def test_check_battery(capsys):
    assert main(["check"]) == 0
    assert "PASS unitarity" in capsys.readouterr().out


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    assert parse_config(path, check_speed=False).hash()
