"""Experiment configuration: YAML in, validated dataclasses out.

A config is a small tree with sections ``grid``, ``potential``, ``timedep``,
``cutoff``, ``frame``, ``initial``, ``time``, ``norm``, ``fit`` and a free-form
``params`` mapping for experiment-specific knobs.  Every key has a default;
unknown keys are rejected.  ``SCHEMA`` documents types and defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .funcalc import SpectralCutoff, compute_k
from .grid import GridSpec
from .hamiltonian import HamiltonianOp, PotentialSpec, TimeDepPotentialSpec


class ConfigParseError(ValueError):
    pass


class ConfigValidationError(ValueError):
    pass


class SpeedWarning(UserWarning):
    pass


EXPERIMENTS = (
    "theorem21", "dichotomy", "state_leakage", "operator_norm", "info_bound", "weighted",
    "td_theorem", "time_reversal", "basic_equality", "pull_through", "density",
    "speed_constant", "commutator",
)


@dataclass
class CutoffConfig:
    lower: float = 0.0
    upper: float = 0.5
    width: float = 0.05

    def build(self) -> SpectralCutoff:
        return SpectralCutoff(self.lower, self.upper, self.width)


@dataclass
class FrameConfig:
    c: float = 1.5
    a: float = 8.0
    b: float = 6.0
    v: float | None = None
    s_min: float = 8.0


@dataclass
class PacketConfig:
    center: float = 0.0
    momentum: float = 0.9
    width: float = 2.0


@dataclass
class TimeConfig:
    dt: float = 0.01
    t_min: float = 5.0
    t_max: float = 40.0
    num: int = 8
    spacing: str = "geometric"
    samples: list | None = None
    record_stride: int = 1

    def grid(self) -> np.ndarray:
        """Sample times, snapped to whole steps of ``dt``."""
        if self.samples is not None:
            t = np.asarray(self.samples, dtype=float)
        elif self.spacing == "geometric":
            t = np.geomspace(self.t_min, self.t_max, self.num)
        else:
            t = np.linspace(self.t_min, self.t_max, self.num)
        return np.round(t / self.dt) * self.dt


@dataclass
class NormConfig:
    mode: str = "block"
    tol: float = 1e-6
    max_iter: int = 200
    samples: int = 16


@dataclass
class FitConfig:
    window: list | None = None
    target: float | None = None
    tol: float = 0.0


@dataclass
class ExperimentConfig:
    experiment: str = "theorem21"
    grid: GridSpec = field(default_factory=GridSpec)
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    timedep: TimeDepPotentialSpec | None = None
    cutoff: CutoffConfig = field(default_factory=CutoffConfig)
    frame: FrameConfig = field(default_factory=FrameConfig)
    initial: PacketConfig = field(default_factory=PacketConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    norm: NormConfig = field(default_factory=NormConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    params: dict = field(default_factory=dict)
    seed: int = 0
    k: float | None = field(default=None, compare=False)
    warnings: list = field(default_factory=list, compare=False)

    def hamiltonian(self) -> HamiltonianOp:
        return HamiltonianOp(self.grid, self.potential, self.timedep)

    def to_dict(self) -> dict:
        """Plain-data echo of every setting (defaults included)."""
        d = {
            "experiment": self.experiment,
            "grid": {"dim": self.grid.dim, "extent": self.grid.extent, "points": self.grid.points},
            "potential": {"preset": self.potential.preset, "params": dict(self.potential.params)},
            "timedep": None if self.timedep is None else {
                "profile": {"preset": self.timedep.profile.preset, "params": dict(self.timedep.profile.params)},
                "mu": self.timedep.mu,
            },
            "params": dict(self.params),
            "seed": self.seed,
        }
        for name in ("cutoff", "frame", "initial", "time", "norm", "fit"):
            d[name] = dataclasses.asdict(getattr(self, name))
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, k=None, warnings=[], **changes)


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigValidationError(f"section '{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigValidationError(f"unknown keys in '{name}': {sorted(extra)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(f"section '{name}': {exc}") from exc


def _potential(data, name) -> PotentialSpec:
    data = data or {}
    extra = set(data) - {"preset", "params"}
    if extra:
        raise ConfigValidationError(f"unknown keys in '{name}': {sorted(extra)}")
    try:
        return PotentialSpec(data.get("preset", "zero"), dict(data.get("params") or {}))
    except ValueError as exc:
        raise ConfigValidationError(f"{name}: {exc}") from exc


TOP_KEYS = {"experiment", "grid", "potential", "timedep", "cutoff", "frame", "initial", "time",
            "norm", "fit", "params", "seed"}


def config_from_dict(data: dict | None, check_speed: bool = True) -> ExperimentConfig:
    data = dict(data or {})
    extra = set(data) - TOP_KEYS
    if extra:
        raise ConfigValidationError(f"unknown top-level keys: {sorted(extra)}")
    exp = data.get("experiment", "theorem21")
    if exp not in EXPERIMENTS:
        raise ConfigValidationError(f"unknown experiment {exp!r}; expected one of {EXPERIMENTS}")
    td = data.get("timedep")
    timedep = None
    if td is not None:
        extra = set(td) - {"profile", "mu"}
        if extra:
            raise ConfigValidationError(f"unknown keys in 'timedep': {sorted(extra)}")
        try:
            timedep = TimeDepPotentialSpec(_potential(td.get("profile"), "timedep.profile"), float(td.get("mu", 2.0)))
        except ValueError as exc:
            raise ConfigValidationError(f"timedep: {exc}") from exc
    cfg = ExperimentConfig(
        experiment=exp,
        grid=_section(GridSpec, data.get("grid"), "grid"),
        potential=_potential(data.get("potential"), "potential"),
        timedep=timedep,
        cutoff=_section(CutoffConfig, data.get("cutoff"), "cutoff"),
        frame=_section(FrameConfig, data.get("frame"), "frame"),
        initial=_section(PacketConfig, data.get("initial"), "initial"),
        time=_section(TimeConfig, data.get("time"), "time"),
        norm=_section(NormConfig, data.get("norm"), "norm"),
        fit=_section(FitConfig, data.get("fit"), "fit"),
        params=dict(data.get("params") or {}),
        seed=int(data.get("seed", 0)),
    )
    validate(cfg, check_speed=check_speed)
    return cfg


def validate(cfg: ExperimentConfig, check_speed: bool = True) -> ExperimentConfig:
    """Check invariants; computes ``k`` unless ``check_speed`` is false."""
    fr = cfg.frame
    if not 0 < fr.b < fr.a:
        raise ConfigValidationError(f"b<a required (got a={fr.a}, b={fr.b})")
    if cfg.time.dt <= 0:
        raise ConfigValidationError("dt>0 required")
    if cfg.time.t_min > cfg.time.t_max:
        raise ConfigValidationError("t_min<=t_max required")
    if cfg.norm.mode not in ("block", "matvec", "sampled"):
        raise ConfigValidationError(f"norm.mode must be block, matvec or sampled, got {cfg.norm.mode!r}")
    try:
        cut = cfg.cutoff.build()
    except ValueError as exc:
        raise ConfigValidationError(f"cutoff: {exc}") from exc
    if check_speed:
        k = compute_k(cut, cfg.hamiltonian().static()).value
        cfg.k = k
        if cfg.grid.momentum_cutoff < 4 * k:
            raise ConfigValidationError(
                f"p_max>=4k required: p_max={cfg.grid.momentum_cutoff:.3g}, k={k:.3g}")
        if fr.c <= k:
            msg = f"c={fr.c} <= k={k:.4g}: running as a sub-k negative control"
            cfg.warnings.append(msg)
            warnings.warn(msg, SpeedWarning, stacklevel=2)
    return cfg


def parse_config(path, check_speed: bool = True) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigParseError(f"{path}: invalid YAML{where}: {getattr(exc, 'problem', exc)}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigParseError(f"{path}: top level must be a mapping")
    return config_from_dict(data, check_speed=check_speed)


SCHEMA = {
    "experiment": {"type": "string", "enum": list(EXPERIMENTS), "default": "theorem21"},
    "seed": {"type": "integer", "default": 0},
    "grid": {"dim": "1|2 (1)", "extent": "L > 0 (80.0)", "points": "N, power of two >= 8 (512)"},
    "potential": {"preset": "zero|constant|gaussian_well|barrier|soft_coulomb (zero)",
                  "params": "preset parameters: depth/height/width, value, charge/epsilon"},
    "timedep": {"profile": "potential block for w(x)", "mu": "decay exponent (2.0)",
                "_": "null for a time-independent Hamiltonian (default)"},
    "cutoff": {"lower": "E- (0.0)", "upper": "E+ (0.5)", "width": "transition width delta_g (0.05)"},
    "frame": {"c": "cone speed (1.5)", "a": "cone offset (8.0)", "b": "data radius, b < a (6.0)",
              "v": "observable drift, null = (k + c) / 2", "s_min": "minimum adiabatic scale (8.0)"},
    "initial": {"center": "x0 (0.0)", "momentum": "p0 (0.9)", "width": "sigma (2.0)"},
    "time": {"dt": "step (0.01)", "t_min": "first sample (5.0)", "t_max": "last sample (40.0)",
             "num": "number of samples (8)", "spacing": "geometric|linear (geometric)",
             "samples": "explicit list overriding the above (null)", "record_stride": "steps per record (1)"},
    "norm": {"mode": "block|matvec|sampled (block)", "tol": "relative power-iteration tolerance (1e-6)",
             "max_iter": "power-iteration cap (200)", "samples": "random states in sampled mode (16)"},
    "fit": {"window": "[t1, t2] or null for all samples", "target": "target exponent or null",
            "tol": "verdict tolerance (0.0)"},
    "params": "experiment-specific mapping (c_values, rho_values, t, alpha, eps, windows, s_values, orders...)",
}
