"""Command-line entry point: ``lightcone {check,run,sweep,fit,report}``.

Exit codes: 0 when every verdict passes (or ``--no-fail-exit``), 1 on a fail
verdict, 2 on usage or configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .config import ConfigParseError, ConfigValidationError, ExperimentConfig, parse_config, validate
from .experiments import VERDICT_RANK, Check, ExperimentResult, LeakageCurve, run_experiment
from .fitting import InsufficientPointsError, fit_decay
from .observables import BasicEqualityLedger

log = logging.getLogger("lightcone")

SWEEP_AXES = ("c", "mu", "delta_g", "a")


def artifact_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def thread_count(flag: int | None) -> int:
    env = os.environ.get("LIGHTCONE_THREADS")
    if env:
        return max(1, int(env))
    if flag:
        return max(1, flag)
    return os.cpu_count() or 1


def worst(verdicts) -> str:
    v = list(verdicts)
    return max(v, key=VERDICT_RANK.__getitem__) if v else "flagged"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_table(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not rows:
            return
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    return obj


def write_outputs(result: ExperimentResult, cfg: ExperimentConfig, out: Path) -> list[str]:
    """Curves as CSV plus two-column plot data, tables as CSV, and a JSON summary."""
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, curve in result.curves.items():
        if not isinstance(curve, LeakageCurve):
            continue
        x_name = "rho" if curve.kind == "info" else ("s" if curve.kind == "remainder" else "t")
        curve.to_csv(out / f"{name}.csv", x_name)
        with open(out / f"{name}.dat", "w") as fh:
            for t, v in zip(curve.times, curve.values):
                fh.write(f"{t:.17g} {v:.17g}\n")
        files += [f"{name}.csv", f"{name}.dat"]
    for name, table in result.tables.items():
        if isinstance(table, BasicEqualityLedger):
            table.to_csv(out / f"{name}.csv")
        else:
            write_table(out / f"{name}.csv", table)
        files.append(f"{name}.csv")
    summary = {
        "experiment": result.name,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "k": cfg.k,
        "warnings": list(cfg.warnings),
        "fits": {k: (f.as_dict() if f is not None else None) for k, f in result.fits.items()},
        "checks": [c.as_dict() for c in result.checks],
        "verdicts": result.verdicts,
        "verdict": result.verdict,
        "summary": _jsonable(result.summary),
        "monitors": {k: _jsonable({"converged": c.converged, "aborted_at": c.aborted_at})
                     for k, c in result.curves.items() if isinstance(c, LeakageCurve)},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
    files.append("summary.json")
    return files


def write_manifest(out: Path, config_hash: str, wall: float, verdicts: dict, files: list[str]) -> dict:
    manifest = {
        "config_hash": config_hash,
        "artifact_version": artifact_version(),
        "wall_clock_s": wall,
        "verdicts": verdicts,
        "verdict": worst(verdicts.values()),
        "outputs": sorted(files),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def run_config(cfg: ExperimentConfig, out: Path, t0: float | None = None) -> dict:
    t0 = time.perf_counter() if t0 is None else t0
    result = run_experiment(cfg)
    files = write_outputs(result, cfg, out)
    verdicts = {f"{result.name}:{k}": v for k, v in result.verdicts.items()}
    return write_manifest(out, cfg.hash(), time.perf_counter() - t0, verdicts, files)


def sweep_values(cfg: ExperimentConfig, axis: str, raw: list[str]) -> list[float]:
    """Parse sweep values; a trailing ``k`` multiplies by the run's speed constant."""
    if not raw:
        raise ConfigValidationError("sweep needs at least one value")
    out = []
    for item in raw:
        if item.endswith("k"):
            if cfg.k is None:
                validate(cfg)
            out.append(float(item[:-1] or 1.0) * cfg.k)
        else:
            out.append(float(item))
    return out


def with_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "c":
        return cfg.replace(frame=dataclasses.replace(cfg.frame, c=value))
    if axis == "a":
        return cfg.replace(frame=dataclasses.replace(cfg.frame, a=value))
    if axis == "delta_g":
        return cfg.replace(cutoff=dataclasses.replace(cfg.cutoff, width=value))
    if axis == "mu":
        if cfg.timedep is None:
            raise ConfigValidationError("mu sweep needs a timedep section")
        return cfg.replace(timedep=dataclasses.replace(cfg.timedep, mu=value))
    raise ConfigValidationError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")


def _sweep_point(args):
    cfg, out = args
    validate(cfg)
    return run_config(cfg, out)


def sweep(cfg: ExperimentConfig, axis: str, values: list[float], out: Path, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    jobs = [(with_axis(cfg, axis, v), out / f"{axis}_{i:03d}") for i, v in enumerate(values)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            manifests = list(pool.map(_sweep_point, jobs))
    else:
        manifests = [_sweep_point(j) for j in jobs]
    rows, verdicts, files = [], {}, []
    for i, (v, m, (_, sub)) in enumerate(zip(values, manifests, jobs)):
        rows.append({"index": i, axis: v, "verdict": m["verdict"], "dir": sub.name})
        for k, vv in m["verdicts"].items():
            verdicts[f"{sub.name}/{k}"] = vv
        files += [f"{sub.name}/{f}" for f in m["outputs"]] + [f"{sub.name}/manifest.json"]
    write_table(out / "sweep.csv", rows)
    files.append("sweep.csv")
    return write_manifest(out, cfg.hash(), time.perf_counter() - t0, verdicts, files)


def run_checks() -> list[Check]:
    """Invariant battery: unitarity, energy, oracle equivalence, commutator slopes."""
    from .funcalc import Logistic, SpectralCutoff, commutator_expansion, ad_powers, hs_apply, spectral_apply
    from .grid import GridSpec, gaussian_packet
    from .hamiltonian import HamiltonianOp, PotentialSpec
    from .propagator import PropagatorConfig, energy, evolve, exact_free_gaussian

    checks = []
    g = GridSpec(1, 80.0, 512)
    H = HamiltonianOp(g)
    psi = gaussian_packet(g, 0.0, 0.5, 2.0)
    # the packet wraps the periodic box; conservation does not care
    rec = evolve(psi, H, 100.0, PropagatorConfig(dt=0.01, record_stride=1000, boundary_threshold=1.0),
                 observe=lambda t, p: {"E": energy(p, H)})
    E = rec.functionals["E"]
    checks.append(Check("unitarity", rec.max_norm_drift, 1e-10, "<="))
    checks.append(Check("energy", float(np.max(np.abs(E - E[0])) / abs(E[0])), 1e-8, "<="))
    r = evolve(psi, H, 10.0, PropagatorConfig(dt=0.01, record_stride=1000))
    ex = exact_free_gaussian(g, 0.0, 0.5, 2.0, 10.0)
    checks.append(Check("free_gaussian_oracle", float(g.norm(r.final.values - ex.values)), 1e-6, "<="))

    small = GridSpec(1, 7.0, 32)
    Hw = HamiltonianOp(small, PotentialSpec("gaussian_well", {"depth": 1.0, "width": 1.0}))
    cut = SpectralCutoff(-0.5, 1.5, 0.25)
    phi = gaussian_packet(small, 0.5, 0.3, 0.8)
    diff = small.norm(hs_apply(cut, Hw, phi).values - spectral_apply(cut, Hw, phi).values)
    checks.append(Check("hs_vs_spectral", float(diff), 1e-6, "<="))

    s_vals = np.geomspace(4, 64, 9)
    B = ad_powers(cut, Hw, 2)
    for n in (1, 2, 3):
        norms = [commutator_expansion(cut, Hw, Logistic(), 0.0, s, n, B).remainder_norm for s in s_vals]
        fit = fit_decay(s_vals, norms)
        checks.append(Check(f"commutator_order{n}_slope", fit.exponent, -n + 0.3, "<="))
    return checks


def _exit(verdict: str, no_fail_exit: bool) -> int:
    return 1 if verdict == "fail" and not no_fail_exit else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lightcone", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="worker pool size (env LIGHTCONE_THREADS wins)")
    parser.add_argument("--no-fail-exit", action="store_true", help="exit 0 even on fail verdicts")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("check", help="run the invariant battery")
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_sw = sub.add_parser("sweep", help="run a config over one axis")
    p_sw.add_argument("config")
    p_sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sw.add_argument("--values", nargs="*", default=[], help="values; suffix k scales by the speed constant")
    p_sw.add_argument("--out", default=None)
    p_fit = sub.add_parser("fit", help="fit a power law to a two-column CSV")
    p_fit.add_argument("csv")
    p_fit.add_argument("--target", type=float, default=None)
    p_fit.add_argument("--tol", type=float, default=0.0)
    p_fit.add_argument("--window", type=float, nargs=2, default=None)
    p_rep = sub.add_parser("report", help="summarize a run manifest")
    p_rep.add_argument("manifest")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            checks = run_checks()
            for c in checks:
                print(f"{c.verdict.upper():4s} {c.name}: {c.value:.3e} {c.relation} {c.threshold:.3e}")
            return _exit(worst(c.verdict for c in checks), args.no_fail_exit)
        if args.command == "run":
            t0 = time.perf_counter()
            cfg = parse_config(args.config)
            out = Path(args.out or f"runs/{cfg.experiment}-{cfg.hash()}")
            m = run_config(cfg, out, t0)
            print(f"{m['verdict']}: {len(m['outputs'])} files in {out}")
            return _exit(m["verdict"], args.no_fail_exit)
        if args.command == "sweep":
            cfg = parse_config(args.config)
            values = sweep_values(cfg, args.axis, args.values)
            out = Path(args.out or f"runs/{cfg.experiment}-{cfg.hash()}-{args.axis}")
            m = sweep(cfg, args.axis, values, out, thread_count(args.threads))
            print(f"{m['verdict']}: {len(values)} points in {out}")
            return _exit(m["verdict"], args.no_fail_exit)
        if args.command == "fit":
            data = np.loadtxt(args.csv, delimiter=",", skiprows=1, ndmin=2)
            fit = fit_decay(data[:, 0], data[:, 1], args.window, args.target, args.tol)
            print(json.dumps(fit.as_dict(), indent=2))
            return _exit(fit.verdict, args.no_fail_exit)
        if args.command == "report":
            print(format_report(json.loads(Path(args.manifest).read_text())))
            return 0
    except (ConfigParseError, ConfigValidationError, InsufficientPointsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


def format_report(manifest: dict) -> str:
    lines = [
        f"config {manifest['config_hash']}  version {manifest['artifact_version']}  "
        f"wall {manifest['wall_clock_s']:.1f}s",
        f"overall: {manifest['verdict']}",
    ]
    for name, v in sorted(manifest["verdicts"].items()):
        lines.append(f"  {v:7s} {name}")
    lines.append(f"{len(manifest['outputs'])} output files")
    return "\n".join(lines)


if __name__ == "__main__":
    sys.exit(main())
