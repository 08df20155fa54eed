import dataclasses

import pytest

from lightcone.config import (
    ConfigParseError, ConfigValidationError, ExperimentConfig, SpeedWarning, config_from_dict, parse_config,
)

BASE = {"grid": {"extent": 40.0, "points": 256}, "cutoff": {"lower": 0.0, "upper": 0.5, "width": 0.05}}


def test_defaults_are_echoed():
    cfg = config_from_dict({}, check_speed=False)
    d = cfg.to_dict()
    assert d["grid"] == {"dim": 1, "extent": 80.0, "points": 512}
    assert d["time"]["dt"] == 0.01 and d["norm"]["mode"] == "block"
    assert d["timedep"] is None


def test_unknown_keys_rejected():
    with pytest.raises(ConfigValidationError, match="unknown"):
        config_from_dict({"grdi": {}}, check_speed=False)
    with pytest.raises(ConfigValidationError, match="frame"):
        config_from_dict({"frame": {"speed": 2}}, check_speed=False)
    with pytest.raises(ConfigValidationError, match="experiment"):
        config_from_dict({"experiment": "nope"}, check_speed=False)


def test_b_must_be_below_a():
    with pytest.raises(ConfigValidationError, match="b<a required"):
        config_from_dict({"frame": {"a": 6.0, "b": 8.0}}, check_speed=False)


def test_momentum_resolution_guard():
    with pytest.raises(ConfigValidationError, match="p_max"):
        config_from_dict({"grid": {"extent": 80.0, "points": 16}, "cutoff": {"upper": 0.5}})


def test_sub_k_cone_warns():
    with pytest.warns(SpeedWarning):
        cfg = config_from_dict({**BASE, "frame": {"c": 0.5}})
    # coarse momentum grid: k sits just below the continuum value 1
    assert 0.9 < cfg.k <= 1.0
    assert cfg.warnings


def test_hash_tracks_settings():
    a = config_from_dict(BASE, check_speed=False)
    b = config_from_dict(BASE, check_speed=False)
    assert a.hash() == b.hash() and len(a.hash()) == 16
    c = a.replace(frame=dataclasses.replace(a.frame, c=2.0))
    assert c.hash() != a.hash()


def test_time_grid_snaps_to_steps():
    cfg = config_from_dict({"time": {"dt": 0.02, "t_min": 5, "t_max": 40, "num": 8}}, check_speed=False)
    t = cfg.time.grid()
    assert len(t) == 8
    assert all(abs(x / 0.02 - round(x / 0.02)) < 1e-9 for x in t)


def test_yaml_errors_carry_position(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("grid:\n  extent: [1, 2\n")
    with pytest.raises(ConfigParseError, match="line"):
        parse_config(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigParseError):
        parse_config(p)


def test_timedep_section(tmp_path):
    p = tmp_path / "td.yaml"
    p.write_text("timedep:\n  profile: {preset: barrier, params: {height: 0.5}}\n  mu: 3.0\n")
    cfg = parse_config(p, check_speed=False)
    assert cfg.timedep.mu == 3.0 and cfg.hamiltonian().is_time_dependent
    assert isinstance(cfg, ExperimentConfig)
