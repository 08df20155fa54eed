"""End-to-end checks: leakage curves, operator-norm curves and their decay fits.

The operators under test have the form ``mask_out . U_t . G . right`` with
``G`` either ``g(H)`` or ``g_+(H)``.  Their norms are estimated by power
iteration in one of three modes:

``block``
    Materialize ``M_t`` on the input subspace (the nodes of the right mask,
    or the whole grid for a weight) by pushing basis vectors through as a
    batch, then power-iterate on the small matrix.
``matvec``
    Matrix-free power iteration on ``M_t* M_t``; each iteration evolves
    forward and back with the splitting scheme.
``sampled``
    Largest ``||M_t phi||`` over random unit ``phi``: a cheap lower bound.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .fitting import DecayFit, InsufficientPointsError, fit_decay
from .funcalc import (
    Logistic, SpectralCutoff, ad_powers, commutator_expansion, compute_k, cutoff_apply, sharp_window_k,
)
from .grid import GridSpec, WaveFunction, gaussian_packet, japanese_bracket, probability_outside
from .hamiltonian import HamiltonianOp, PotentialSpec, kato_diagnostic
from .observables import (
    ConeFrame, FFunction, basic_equality_run, cauchy_differences, g_plus_density_check,
    pull_through_residual, run_scale,
)
from .propagator import (
    PropagatorConfig, boundary_mask, evolve_values, exact_evolution, heisenberg_conjugate,
)

log = logging.getLogger(__name__)

VERDICT_RANK = {"pass": 0, "flagged": 1, "fail": 2}


@dataclass
class NormEstimate:
    value: float
    iterations: int
    converged: bool


def power_norm(apply: Callable, adjoint: Callable, shape, seed: int = 0, tol: float = 1e-6,
               max_iter: int = 200) -> NormEstimate:
    """``||M||`` by power iteration on ``M* M`` from a seeded random start."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    v /= np.linalg.norm(v)
    prev = None
    for it in range(1, max_iter + 1):
        w = adjoint(apply(v))
        sigma = float(np.sqrt(max(np.real(np.vdot(v, w)), 0.0)))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return NormEstimate(0.0, it, True)
        v = w / nw
        if prev is not None and abs(sigma - prev) <= tol * sigma:
            return NormEstimate(sigma, it, True)
        prev = sigma
    log.warning("power iteration hit the %d-step cap", max_iter)
    return NormEstimate(prev, max_iter, False)


def matrix_norm(A: np.ndarray, **kw) -> NormEstimate:
    return power_norm(lambda v: A @ v, lambda w: A.conj().T @ w, (A.shape[1],), **kw)


def sampled_norm(apply: Callable, shape, samples: int = 16, seed: int = 0) -> NormEstimate:
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(samples):
        v = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        v /= np.linalg.norm(v)
        best = max(best, float(np.linalg.norm(apply(v))))
    return NormEstimate(best, samples, True)


@dataclass
class LeakageCurve:
    times: np.ndarray
    values: np.ndarray
    kind: str = "state"
    meta: dict = field(default_factory=dict)
    converged: np.ndarray | None = None
    aborted_at: float | None = None

    def fit(self, window=None, target=None, tol=0.0, two_sided=False) -> DecayFit:
        return fit_decay(self.times, self.values, window, target, tol, two_sided=two_sided)

    @property
    def terminal(self) -> float:
        return float(self.values[-1])

    def to_csv(self, path, x_name: str = "t") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([x_name, "value"])
            for t, v in zip(self.times, self.values):
                w.writerow([f"{t:.17g}", f"{v:.17g}"])


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    relation: str
    note: str = ""

    @property
    def verdict(self) -> str:
        ok = {"<=": self.value <= self.threshold, ">=": self.value >= self.threshold}[self.relation]
        return "pass" if ok else "fail"

    def as_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "threshold": self.threshold,
                "relation": self.relation, "verdict": self.verdict, "note": self.note}


@dataclass
class ExperimentResult:
    name: str
    curves: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def verdicts(self) -> dict:
        out = {c.name: c.verdict for c in self.checks}
        for key, fit in self.fits.items():
            if fit is not None and fit.target is not None:
                out[f"fit:{key}"] = fit.verdict
        return out

    @property
    def verdict(self) -> str:
        v = list(self.verdicts.values())
        if not v:
            return "flagged"
        return max(v, key=VERDICT_RANK.__getitem__)


class Setup:
    """Objects derived from a config once: Hamiltonian, cutoff, ``k`` and masks."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.grid: GridSpec = cfg.grid
        self.H: HamiltonianOp = cfg.hamiltonian()
        self.H0 = self.H.static()
        self.g: SpectralCutoff = cfg.cutoff.build()
        self.k = cfg.k if cfg.k is not None else compute_k(self.g, self.H0).value
        self.jb = japanese_bracket(self.grid).values
        self.dt = cfg.time.dt

    def outer(self, radius: float) -> np.ndarray:
        return (self.jb >= radius).astype(float)

    def inner(self, radius: float) -> np.ndarray:
        return (self.jb <= radius).astype(float)

    def packet(self) -> WaveFunction:
        p = self.cfg.initial
        return gaussian_packet(self.grid, p.center, p.momentum, p.width)

    def initial_state(self) -> WaveFunction:
        """``normalize(g(H) chi_b^- phi)``."""
        phi = self.packet()
        vals = cutoff_apply(self.g, self.H0, self.inner(self.cfg.frame.b) * phi.values)
        return phi.with_values(vals).normalized()

    def evolve(self, values: np.ndarray, t0: float, t1: float) -> np.ndarray:
        """Exact spectral evolution for static ``H``, splitting scheme otherwise."""
        if self.H.is_time_dependent:
            return evolve_values(values, self.H, t0, t1, self.dt)
        return exact_evolution(values, self.H, t1 - t0)

    def g_plus(self, values: np.ndarray, tol: float | None = None, T0: float = 8.0,
               T_cap: float | None = None) -> tuple[np.ndarray, dict]:
        """``g_+(H)`` on a batch by doubling the horizon until the block difference drops below ``tol``."""
        if not self.H.is_time_dependent:
            return cutoff_apply(self.g, self.H0, values), {"horizon": 0.0, "tail": 0.0, "converged": True}
        p = self.cfg.params
        tol = p.get("g_plus_tol", 1e-6) if tol is None else tol
        T_cap = p.get("g_plus_cap", 512.0) if T_cap is None else T_cap
        mu = self.H.timedep.mu

        def g_T(T):
            fwd = evolve_values(values, self.H, 0.0, T, self.dt)
            return evolve_values(cutoff_apply(self.g, self.H0, fwd), self.H, T, 0.0, self.dt)

        T = T0
        prev = g_T(T)
        diff = float("inf")
        while 2 * T <= T_cap:
            cur = g_T(2 * T)
            d = (cur - prev).reshape(cur.shape[0], -1) if cur.ndim > self.grid.dim else (cur - prev).reshape(1, -1)
            diff = float(np.linalg.norm(d, 2))
            prev, T = cur, 2 * T
            if diff < tol:
                break
        info = {"horizon": T, "tail": diff / (2.0**mu - 1.0), "converged": diff < tol, "last_difference": diff}
        if not info["converged"]:
            log.warning("g_+ block not converged at T=%g (difference %.2e)", T, diff)
        return prev, info


def _times(cfg: ExperimentConfig) -> np.ndarray:
    return cfg.time.grid()


def state_leakage_curve(cfg: ExperimentConfig, c: float | None = None, a: float | None = None,
                        psi0: WaveFunction | None = None, setup: Setup | None = None) -> LeakageCurve:
    """``||chi(<x> >= c t + a) psi_t||`` with ``psi_0 = normalize(g(H) chi_b^- phi)``.

    The curve stops at the first sample whose boundary-strip mass exceeds the
    threshold.
    """
    s = setup or Setup(cfg)
    c = cfg.frame.c if c is None else c
    a = cfg.frame.a if a is None else a
    psi = psi0 if psi0 is not None else s.initial_state()
    times = _times(cfg)
    edge = boundary_mask(s.grid, PropagatorConfig().boundary_width)
    thresh = cfg.params.get("boundary_threshold", 1e-8)
    vals, kept = [], []
    values, t_prev = psi.values, 0.0
    aborted = None
    for t in times:
        values = evolve_values(values, s.H, t_prev, t, s.dt)
        t_prev = t
        if np.sum(np.abs(values[edge]) ** 2) * s.grid.cell_volume > thresh:
            aborted = float(t)
            log.warning("boundary mass exceeded at t=%g; curve truncated", t)
            break
        vals.append(np.sqrt(probability_outside(psi.with_values(values), c * t + a)))
        kept.append(t)
    return LeakageCurve(np.array(kept), np.array(vals), "state",
                        {"c": c, "a": a, "b": cfg.frame.b, "k": s.k, "window": [s.g.lower, s.g.upper]},
                        aborted_at=aborted)


def _basis(grid: GridSpec, support: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(support.reshape(-1))
    E = np.zeros((len(idx), grid.size), dtype=complex)
    E[np.arange(len(idx)), idx] = 1.0
    return E.reshape((len(idx),) + grid.shape)


def operator_norm_curve(cfg: ExperimentConfig, c: float | None = None, a: float | None = None,
                        weight: np.ndarray | None = None, use_g_plus: bool = False,
                        setup: Setup | None = None, mode: str | None = None) -> LeakageCurve:
    """``||chi(<x> >= c t + a) U_t G R||`` per sample time.

    ``R`` is ``chi_b^-`` or, when given, the diagonal ``weight``; ``G`` is
    ``g(H)`` or ``g_+(H)``.
    """
    s = setup or Setup(cfg)
    c = cfg.frame.c if c is None else c
    a = cfg.frame.a if a is None else a
    mode = mode or cfg.norm.mode
    right = weight if weight is not None else s.inner(cfg.frame.b)
    times = _times(cfg)
    nk = dict(seed=cfg.seed, tol=cfg.norm.tol, max_iter=cfg.norm.max_iter)
    meta = {"c": c, "a": a, "b": cfg.frame.b, "k": s.k, "mode": mode, "g_plus": use_g_plus,
            "window": [s.g.lower, s.g.upper]}
    vals, conv = [], []

    if mode == "block":
        support = right != 0
        E = _basis(s.grid, support) * right[support].reshape((-1,) + (1,) * s.grid.dim)
        if use_g_plus:
            X, info = s.g_plus(E)
            meta["g_plus_info"] = info
        else:
            X = cutoff_apply(s.g, s.H0, E)
        m = X.shape[0]
        t_prev = 0.0
        Xt = X
        for t in times:
            if s.H.is_time_dependent:
                Xt = evolve_values(Xt, s.H, t_prev, t, s.dt)
                t_prev = t
            else:
                Xt = exact_evolution(X, s.H, t)
            A = (s.outer(c * t + a) * Xt).reshape(m, -1).T
            est = matrix_norm(A, **nk)
            vals.append(est.value)
            conv.append(est.converged)
    else:
        def G(v):
            return s.g_plus(v)[0] if use_g_plus else cutoff_apply(s.g, s.H0, v)

        for t in times:
            out = s.outer(c * t + a)

            def apply(v, t=t, out=out):
                return out * evolve_values(G(right * v), s.H, 0.0, t, s.dt)

            def adjoint(w, t=t, out=out):
                return np.conj(right) * G(evolve_values(out * w, s.H, t, 0.0, s.dt))

            if mode == "matvec":
                est = power_norm(apply, adjoint, s.grid.shape, **nk)
            else:
                est = sampled_norm(apply, s.grid.shape, cfg.norm.samples, cfg.seed)
            vals.append(est.value)
            conv.append(est.converged)
    return LeakageCurve(times, np.array(vals), "operator", meta, np.array(conv))


def _fit_or_none(curve: LeakageCurve, window, target=None, tol=0.0, two_sided=False):
    try:
        return curve.fit(window, target, tol, two_sided)
    except InsufficientPointsError as exc:
        log.warning("fit skipped: %s", exc)
        return None


def slope_steepening(curve: LeakageCurve, windows: int = 3, points: int = 6) -> dict:
    """Slopes over successive overlapping windows; the tail of a super-polynomial decay steepens."""
    n = len(curve.times)
    if n < points:
        return {"slopes": [], "steepening": None}
    starts = np.unique(np.linspace(0, n - points, windows).astype(int))
    slopes = []
    for i in starts:
        sl = slice(i, i + points)
        try:
            slopes.append(fit_decay(curve.times[sl], curve.values[sl]).exponent)
        except InsufficientPointsError:
            slopes.append(float("nan"))
    live = [x for x in slopes if np.isfinite(x)]
    return {"slopes": slopes, "steepening": bool(np.all(np.diff(live) <= 0)) if len(live) > 1 else None}


def dichotomy_scan(cfg: ExperimentConfig, c_values, setup: Setup | None = None) -> ExperimentResult:
    """Terminal state leakage and operator-norm slope for each cone speed."""
    s = setup or Setup(cfg)
    window = cfg.fit.window
    rows, res = [], ExperimentResult("dichotomy")
    for c in c_values:
        st = state_leakage_curve(cfg, c=c, setup=s)
        op = operator_norm_curve(cfg, c=c, setup=s)
        fit = _fit_or_none(op, window)
        rows.append({"c": c, "c_over_k": c / s.k, "terminal_leakage": st.terminal,
                     "terminal_norm": op.terminal, "slope": fit.exponent if fit else float("nan")})
        res.curves[f"state_c{c:g}"] = st
        res.curves[f"operator_c{c:g}"] = op
        res.fits[f"operator_c{c:g}"] = fit
    res.tables["dichotomy"] = rows
    res.summary["k"] = s.k
    return res


def theorem21_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> ExperimentResult:
    """Super-``k`` cone decays, sub-packet-speed cone saturates."""
    s = setup or Setup(cfg)
    p = cfg.params
    c_hi, c_lo = p.get("c_high", cfg.frame.c), p.get("c_low", 0.5)
    res = dichotomy_scan(cfg, [c_hi, c_lo], s)
    res.name = "theorem21"
    hi, lo = res.tables["dichotomy"]
    res.checks += [
        Check("super_k_slope", hi["slope"], p.get("slope_max", -2.0), "<="),
        Check("super_k_terminal_leakage", hi["terminal_leakage"], p.get("leak_max", 1e-4), "<="),
        Check("sub_k_terminal_leakage", lo["terminal_leakage"], p.get("leak_min", 0.5), ">="),
        Check("sub_k_slope", lo["slope"], p.get("flat_slope_min", -0.2), ">="),
    ]
    res.summary["steepening"] = slope_steepening(res.curves[f"operator_c{c_hi:g}"])
    return res


def info_bound_experiment(cfg: ExperimentConfig, rho_values, t: float, setup: Setup | None = None,
                          mode: str | None = None) -> LeakageCurve:
    """``||chi(<x> >= rho) alpha_t(chi_b^- g(H))||`` as a function of ``rho``."""
    s = setup or Setup(cfg)
    if s.H.is_time_dependent:
        raise ValueError("the information bound uses the static Heisenberg evolution")
    rho = np.asarray(rho_values, dtype=float)
    a, c = cfg.frame.a, cfg.frame.c
    if np.any(rho <= a + c * t):
        raise ValueError(f"need rho > a + c t = {a + c * t:g} for every rho")
    mode = mode or cfg.norm.mode
    chi_b = s.inner(cfg.frame.b)
    nk = dict(seed=cfg.seed, tol=cfg.norm.tol, max_iter=cfg.norm.max_iter)

    def B(v):
        return chi_b * cutoff_apply(s.g, s.H0, v)

    def B_adj(v):
        return cutoff_apply(s.g, s.H0, chi_b * v)

    vals, conv = [], []
    if mode == "block":
        E = _basis(s.grid, np.ones(s.grid.shape, bool))
        cols = exact_evolution(B(exact_evolution(E, s.H, t)), s.H, -t)
        for r in rho:
            A = (s.outer(r) * cols).reshape(s.grid.size, -1).T
            est = matrix_norm(A, **nk)
            vals.append(est.value)
            conv.append(est.converged)
    else:
        for r in rho:
            out = s.outer(r)

            def apply(v, out=out):
                return out * heisenberg_conjugate(B, WaveFunction(s.grid, v), s.H, t, s.dt).values

            def adjoint(w, out=out):
                return heisenberg_conjugate(B_adj, WaveFunction(s.grid, out * w), s.H, t, s.dt).values

            est = power_norm(apply, adjoint, s.grid.shape, **nk)
            vals.append(est.value)
            conv.append(est.converged)
    return LeakageCurve(rho, np.array(vals), "info", {"t": t, "a": a, "b": cfg.frame.b, "c": c, "k": s.k,
                                                      "mode": mode}, np.array(conv))


def weighted_estimate_experiment(cfg: ExperimentConfig, alpha: float, eps: float,
                                 setup: Setup | None = None) -> tuple[LeakageCurve, DecayFit | None]:
    """``||chi(<x> >= (c + eps) t) e^{-iHt} g(H) <x>^-alpha||`` with its fit against ``-alpha``."""
    s = setup or Setup(cfg)
    weight = s.jb ** (-alpha)
    curve = operator_norm_curve(cfg, c=cfg.frame.c + eps, a=0.0, weight=weight, setup=s)
    curve.meta.update({"alpha": alpha, "eps": eps})
    tol = cfg.params.get("slope_tol", 0.3)
    return curve, _fit_or_none(curve, cfg.fit.window, -alpha, tol)


def td_theorem_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> tuple[LeakageCurve, DecayFit | None]:
    """``||chi(<x> >= c t + a) U_t g_+(H) chi_b^-||`` against the ``t^-1/2`` rate."""
    s = setup or Setup(cfg)
    curve = operator_norm_curve(cfg, use_g_plus=True, setup=s)
    target = cfg.params.get("target", -0.5)
    return curve, _fit_or_none(curve, cfg.fit.window, target, cfg.params.get("slope_tol", 0.2))


def initial_disjointness(cfg: ExperimentConfig, setup: Setup | None = None, s_values=(8, 16, 32, 64)) -> dict:
    """``||f(x_0s) g_+(H) chi_b^- phi||`` for growing ``s``; ``f`` the frame's family member."""
    st = setup or Setup(cfg)
    phi = st.packet()
    x, info = st.g_plus(st.inner(cfg.frame.b) * phi.values)
    v = cfg.frame.v if cfg.frame.v is not None else 0.5 * (st.k + cfg.frame.c)
    f = FFunction(cfg.frame.c - v)
    vals = []
    for sc in s_values:
        fr = ConeFrame(v, cfg.frame.c, cfg.frame.a, cfg.frame.b, sc, st.k)
        xs = (st.jb - fr.a) / fr.s
        vals.append(float(st.grid.norm(f(xs) * x)))
    return {"s": list(s_values), "values": vals, "g_plus": info}


def time_reversal_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> dict:
    """Leakage of ``e^{+iHt} psi_0`` against the forward leakage of ``conj(psi_0)``."""
    s = setup or Setup(cfg)
    if s.H.is_time_dependent:
        raise ValueError("time reversal needs a time-independent Hamiltonian")
    psi = s.initial_state()
    c, a = cfg.frame.c, cfg.frame.a
    times = _times(cfg)
    back, fwd_conj, fwd = [], [], []
    vb, vc, vf, t_prev = psi.values, np.conj(psi.values), psi.values, 0.0
    for t in times:
        vb = evolve_values(vb, s.H, -t_prev, -t, s.dt)
        vc = evolve_values(vc, s.H, t_prev, t, s.dt)
        vf = evolve_values(vf, s.H, t_prev, t, s.dt)
        t_prev = t
        r = c * t + a
        back.append(np.sqrt(probability_outside(psi.with_values(vb), r)))
        fwd_conj.append(np.sqrt(probability_outside(psi.with_values(vc), r)))
        fwd.append(np.sqrt(probability_outside(psi.with_values(vf), r)))
    back, fwd_conj, fwd = map(np.array, (back, fwd_conj, fwd))
    return {
        "backward": LeakageCurve(times, back, "state", {"direction": "backward"}),
        "forward_conj": LeakageCurve(times, fwd_conj, "state", {"direction": "forward of conj"}),
        "forward": LeakageCurve(times, fwd, "state", {"direction": "forward"}),
        "max_difference": float(np.max(np.abs(back - fwd_conj))) if len(times) else 0.0,
        "state_is_real": bool(np.max(np.abs(psi.values.imag)) <= 1e-12),
    }


def speed_constant_experiment(cfg: ExperimentConfig, presets=None, setup: Setup | None = None) -> ExperimentResult:
    """``k`` for the configured window, its sharp-window limit, and the relative-bound check per preset."""
    s = setup or Setup(cfg)
    res = ExperimentResult("speed_constant")
    widths = cfg.params.get("widths", [0.2, 0.1, 0.05])
    sharp = sharp_window_k(s.H0, s.g.lower, s.g.upper, widths)
    res.summary.update({"k": s.k, "sharp_limit": sharp.limit, "widths": list(sharp.widths),
                        "k_by_width": list(sharp.values)})
    if "expected_k" in cfg.params:
        exp = cfg.params["expected_k"]
        res.checks.append(Check("sharp_limit_rel_error", abs(sharp.limit - exp) / exp,
                                cfg.params.get("k_rel_tol", 0.01), "<="))
    rows = []
    for preset, params in (presets or cfg.params.get("presets", {}) or {}).items():
        H = HamiltonianOp(s.grid, PotentialSpec(preset, params))
        kf = kato_diagnostic(H, seed=cfg.seed)
        k = compute_k(s.g, H).value
        bound = float(np.sqrt(2 * (s.g.upper + kf.b) / (1 - kf.a)))
        rows.append({"preset": preset, "k": k, "a_fit": kf.a, "b_fit": kf.b, "bound": bound})
        res.checks.append(Check(f"kato_bound_{preset}", k, bound, "<="))
    res.tables["presets"] = rows
    return res


def commutator_experiment(cfg: ExperimentConfig, orders=(1, 2, 3), s_values=None, offset: float = 0.0,
                          f=None, setup: Setup | None = None) -> ExperimentResult:
    """Remainder norms of the commutator expansion against ``s`` for each order."""
    st = setup or Setup(cfg)
    f = f or Logistic()
    s_values = np.asarray(s_values if s_values is not None else np.geomspace(4, 64, 9), dtype=float)
    tol = cfg.params.get("slope_tol", 0.3)
    B = ad_powers(st.g, st.H0, max(orders) - 1)
    res = ExperimentResult("commutator")
    for n in orders:
        norms = np.array([commutator_expansion(st.g, st.H0, f, offset, sc, n, B).remainder_norm
                          for sc in s_values])
        curve = LeakageCurve(s_values, norms, "remainder", {"order": n, "offset": offset})
        res.curves[f"order{n}"] = curve
        res.fits[f"order{n}"] = _fit_or_none(curve, None, -n, tol)
    res.summary["b_norms"] = [float(np.linalg.norm(b, 2)) for b in B[1:]]
    return res


def basic_equality_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> ExperimentResult:
    """Ledger at the configured step and at half the step, with the refinement ratio."""
    s = setup or Setup(cfg)
    fr_cfg = cfg.frame
    T = cfg.time.t_max
    v = fr_cfg.v if fr_cfg.v is not None else 0.5 * (s.k + fr_cfg.c)
    frame = ConeFrame(v, fr_cfg.c, fr_cfg.a, fr_cfg.b, run_scale(T, fr_cfg.s_min), s.k)
    f = FFunction(frame.span)
    psi = s.packet()
    stride = cfg.time.record_stride
    led = basic_equality_run(psi, s.H, f, frame, T, PropagatorConfig(cfg.time.dt, stride))
    half = basic_equality_run(psi, s.H, f, frame, T, PropagatorConfig(cfg.time.dt / 2, stride))
    ratio = led.max_residual / half.max_residual if half.max_residual > 0 else float("inf")
    res = ExperimentResult("basic_equality")
    res.tables["ledger"] = led
    res.summary.update({"max_residual": led.max_residual, "half_step_residual": half.max_residual,
                        "refinement_ratio": ratio, "frame": frame.__dict__, "delta": f.support[0]})
    res.checks += [
        Check("max_residual", led.max_residual, cfg.params.get("residual_max", 1e-6), "<="),
        Check("ratio_low", ratio, 3.5, ">="),
        Check("ratio_high", ratio, 4.5, "<="),
    ]
    return res


def pull_through_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> ExperimentResult:
    """Pull-through residual and ``g_+`` Cauchy differences against ``t^-mu``."""
    s = setup or Setup(cfg)
    if not s.H.is_time_dependent:
        raise ValueError("pull-through needs a time-dependent part")
    mu = s.H.timedep.mu
    tol = cfg.params.get("slope_tol", 0.3)
    t = _times(cfg)
    psi = s.packet()
    rep = pull_through_residual(s.g, s.H, psi, t, dt=s.dt, T0=cfg.params.get("g_plus_start", 8.0),
                                T_cap=cfg.params.get("g_plus_cap", 2048.0), tol=cfg.params.get("g_plus_tol", 1e-7))
    diffs, _ = cauchy_differences(s.g, s.H, psi, t, s.dt)
    res = ExperimentResult("pull_through")
    res.curves["residual"] = LeakageCurve(t, rep.residual, "pull_through", {"mu": mu})
    res.curves["cauchy"] = LeakageCurve(t, diffs, "cauchy", {"mu": mu})
    res.fits["residual"] = _fit_or_none(res.curves["residual"], cfg.fit.window, -mu, tol, True)
    res.fits["cauchy"] = _fit_or_none(res.curves["cauchy"], cfg.fit.window, -mu, tol, True)
    res.summary.update({"envelope_C": rep.envelope, "g_plus_horizon": rep.cutoff.horizon,
                        "g_plus_tail": rep.cutoff.tail_estimate, "g_plus_converged": rep.cutoff.converged})
    return res


def density_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> ExperimentResult:
    """``||g_{n,+} psi - psi||`` over nested plateaus ``[lo_n, hi_n]``."""
    s = setup or Setup(cfg)
    width = cfg.cutoff.width
    plateaus = cfg.params.get("windows", [[-0.2, 0.5], [-0.4, 1.0], [-0.6, 2.0], [-0.8, 5.0]])
    cuts = [SpectralCutoff(lo - width, hi + width, width) for lo, hi in plateaus]
    psi = s.packet()
    rep = g_plus_density_check(cuts, s.H, psi, dt=s.dt, T0=cfg.params.get("g_plus_start", 8.0),
                               T_cap=cfg.params.get("g_plus_cap", 512.0), tol=cfg.params.get("g_plus_tol", 1e-6))
    res = ExperimentResult("density")
    res.tables["density"] = [{"lower": lo, "upper": hi, "distance": d, "tail": tl}
                             for (lo, hi), d, tl in zip(plateaus, rep.distances, rep.tails)]
    res.checks += [
        Check("strictly_decreasing", float(rep.strictly_decreasing), 1.0, ">="),
        Check("final_distance", float(rep.distances[-1]), cfg.params.get("final_max", 0.01), "<="),
    ]
    return res


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Dispatch on ``cfg.experiment``."""
    s = Setup(cfg)
    p = cfg.params
    name = cfg.experiment
    if name == "theorem21":
        return theorem21_experiment(cfg, s)
    if name == "dichotomy":
        k = s.k
        return dichotomy_scan(cfg, p.get("c_values", [0.5 * k, 1.0 * k, 1.5 * k, 2.0 * k]), s)
    if name == "state_leakage":
        res = ExperimentResult(name, curves={"state": state_leakage_curve(cfg, setup=s)})
        res.fits["state"] = _fit_or_none(res.curves["state"], cfg.fit.window, cfg.fit.target, cfg.fit.tol)
        return res
    if name == "operator_norm":
        res = ExperimentResult(name, curves={"operator": operator_norm_curve(cfg, setup=s)})
        res.fits["operator"] = _fit_or_none(res.curves["operator"], cfg.fit.window, cfg.fit.target, cfg.fit.tol)
        return res
    if name == "info_bound":
        rho = p.get("rho_values", list(np.geomspace(7.0, 70.0, 8)))
        curve = info_bound_experiment(cfg, rho, p.get("t", 2.0), s)
        res = ExperimentResult(name, curves={"info": curve})
        res.fits["info"] = _fit_or_none(curve, None, p.get("target", -2.0), 0.0)
        return res
    if name == "weighted":
        curve, fit = weighted_estimate_experiment(cfg, p.get("alpha", 2.0), p.get("eps", 0.0), s)
        return ExperimentResult(name, curves={"weighted": curve}, fits={"weighted": fit})
    if name == "td_theorem":
        curve, fit = td_theorem_experiment(cfg, s)
        return ExperimentResult(name, curves={"td": curve}, fits={"td": fit},
                                summary={"g_plus": curve.meta.get("g_plus_info")})
    if name == "time_reversal":
        out = time_reversal_experiment(cfg, s)
        res = ExperimentResult(name, curves={k: out[k] for k in ("backward", "forward_conj", "forward")})
        res.checks.append(Check("backward_vs_conj_forward", out["max_difference"], p.get("tol", 1e-8), "<="))
        return res
    if name == "basic_equality":
        return basic_equality_experiment(cfg, s)
    if name == "pull_through":
        return pull_through_experiment(cfg, s)
    if name == "density":
        return density_experiment(cfg, s)
    if name == "speed_constant":
        return speed_constant_experiment(cfg, setup=s)
    if name == "commutator":
        return commutator_experiment(cfg, p.get("orders", (1, 2, 3)), p.get("s_values"),
                                     p.get("offset", 0.0), setup=s)
    raise ValueError(f"unknown experiment {name!r}")
