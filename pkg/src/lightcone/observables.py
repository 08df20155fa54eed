"""Propagation observables ``f(x_ts)`` and the asymptotic energy cutoff ``g_+(H)``.

``x_ts = (<x> - a - v t) / s`` is the position measured from a cone boundary
moving at speed ``v``.  For ``f`` in the family below, the Heisenberg
derivative of ``f(x_ts)`` under the free kinetic term is
``s^-1 u(x_ts) (gamma - v) u(x_ts)`` with ``u = sqrt(f')`` and
``gamma = (p . grad<x> + grad<x> . p) / 2``.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _jets as jets
from .fitting import DecayFit, fit_decay
from .funcalc import SmoothFunction, SpectralCutoff, cutoff_apply
from .grid import GridSpec, SpatialWeight, WaveFunction, bracket_gradient, japanese_bracket
from .hamiltonian import HamiltonianOp
from .propagator import PropagatorConfig, evolve, evolve_values, exact_evolution

log = logging.getLogger(__name__)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


class CutoffNotConvergedWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ConeFrame:
    """Moving frame: drift ``v``, cone speed ``c``, offset ``a``, data radius ``b``, scale ``s``."""

    v: float
    c: float
    a: float
    b: float
    s: float = 8.0
    k_ref: float = 0.0

    def __post_init__(self):
        if not 0 < self.b < self.a:
            raise ValueError(f"need 0 < b < a, got b={self.b}, a={self.a}")
        if self.s < 1:
            raise ValueError("adiabatic scale s must be >= 1")
        if not self.c > self.v > self.k_ref:
            warnings.warn(f"frame speeds not ordered c > v > k: c={self.c}, v={self.v}, k={self.k_ref}",
                          stacklevel=2)

    @property
    def span(self) -> float:
        """Width ``c - v`` of the transition region in frame units."""
        return self.c - self.v

    def with_scale(self, s: float) -> "ConeFrame":
        return ConeFrame(self.v, self.c, self.a, self.b, s, self.k_ref)


def run_scale(t_final: float, s_min: float = 8.0) -> float:
    return max(float(t_final), s_min)


@dataclass(frozen=True)
class Bump(SmoothFunction):
    """``exp(-1 / (z (1 - z)))`` with ``z = (x - lower) / (upper - lower)``; zero off ``(lower, upper)``."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ValueError("bump needs lower < upper")

    def jet(self, x, order: int):
        w = self.upper - self.lower
        z = jets.variable(x, max(order, 2), 1.0 / w, -self.lower / w)
        return jets.flat_exp(jets.mul(z, jets.constant(1.0, z) - z))

    def derivatives(self, x, order: int) -> np.ndarray:
        return jets.to_derivatives(self.jet(x, order))[: order + 1]


class FFunction(SmoothFunction):
    """Monotone ``f`` with ``f' = phi^2 / int phi^2`` for a bump ``phi``.

    ``f`` vanishes left of the bump and equals one right of it; with the bump
    inside ``(0, c - v)`` it belongs to the propagation family.
    """

    def __init__(self, span: float, lower: float | None = None, upper: float | None = None,
                 panels: int = 1024):
        lo = 0.0 if lower is None else lower
        hi = span if upper is None else upper
        if not 0.0 <= lo < hi <= span:
            raise ValueError(f"bump support ({lo}, {hi}) must lie in [0, {span}]")
        self.span = span
        self.bump = Bump(lo, hi)
        self._edges = np.linspace(lo, hi, panels + 1)
        per_panel = self._panel_integral(self._edges[:-1], self._edges[1:])
        cum = np.concatenate([[0.0], np.cumsum(per_panel)])
        self.mass = float(cum[-1])
        self._cum = cum / self.mass

    def _panel_integral(self, lo, hi) -> np.ndarray:
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        x = mid[..., None] + half[..., None] * _GL_NODES
        return half * np.sum(self.bump(x) ** 2 * _GL_WEIGHTS, axis=-1)

    def __repr__(self):
        return f"FFunction(span={self.span}, support=({self.bump.lower}, {self.bump.upper}))"

    @property
    def support(self) -> tuple[float, float]:
        """Support of ``f'``; ``f`` itself is one to the right of it."""
        return (self.bump.lower, self.bump.upper)

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.bump.lower, self.bump.upper)
        j = np.clip(np.searchsorted(self._edges, xc, side="right") - 1, 0, len(self._edges) - 2)
        left = self._edges[j]
        return self._cum[j] + self._panel_integral(left, xc) / self.mass

    def u_derivatives(self, x, order: int) -> np.ndarray:
        """Derivatives of ``u = sqrt(f') = phi / sqrt(int phi^2)``."""
        return self.bump.derivatives(x, order) / np.sqrt(self.mass)

    def u(self, x) -> np.ndarray:
        return self.u_derivatives(x, 0)[0]

    def derivatives(self, x, order: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty((order + 1,) + x.shape)
        out[0] = self.value(x)
        if order >= 1:
            b = self.bump.jet(x, order - 1)
            out[1:] = jets.to_derivatives(jets.mul(b, b))[:order] / self.mass
        return out


class AdmissibleFunction(SmoothFunction):
    """``h = phi~^2`` for a bump ``phi~`` supported in ``(0, c - v)``."""

    def __init__(self, span: float, lower: float | None = None, upper: float | None = None):
        lo = 0.0 if lower is None else lower
        hi = span if upper is None else upper
        if not 0.0 <= lo < hi <= span:
            raise ValueError(f"support ({lo}, {hi}) must lie in [0, {span}]")
        self.span = span
        self.root = Bump(lo, hi)

    def derivatives(self, x, order: int) -> np.ndarray:
        b = self.root.jet(x, order)
        return jets.to_derivatives(jets.mul(b, b))[: order + 1]

    def to_ffunction(self) -> FFunction:
        """The normalized antiderivative, which lies in the propagation family."""
        return FFunction(self.span, self.root.lower, self.root.upper)


def frame_field(grid: GridSpec, frame: ConeFrame, t: float) -> SpatialWeight:
    jb = japanese_bracket(grid).values
    return SpatialWeight(grid, (jb - frame.a - frame.v * t) / frame.s)


def phi_expectation(psi: WaveFunction, f: SmoothFunction, frame: ConeFrame, t: float) -> float:
    xs = frame_field(psi.grid, frame, t).values
    return float(np.sum(f(xs) * psi.density()) * psi.grid.cell_volume)


def gamma_apply(psi: WaveFunction) -> WaveFunction:
    """``(p . grad<x> + grad<x> . p) / 2`` with spectral derivatives."""
    g = psi.grid
    grad = bracket_gradient(g)
    vk = g.fft(psi.values)
    out = np.zeros(g.shape, dtype=complex)
    for k, d in zip(g.wavenumbers, grad):
        p_psi = g.ifft(k * vk)
        p_dpsi = g.ifft(k * g.fft(d * psi.values))
        out += 0.5 * (p_dpsi + d * p_psi)
    return psi.with_values(out)


def heisenberg_derivative(psi: WaveFunction, f: FFunction, frame: ConeFrame, t: float) -> float:
    """``< s^-1 u(x_ts) (gamma - v) u(x_ts) >`` in the state ``psi``."""
    xs = frame_field(psi.grid, frame, t).values
    upsi = psi.with_values(f.u(xs) * psi.values)
    val = upsi.inner(gamma_apply(upsi)) - frame.v * upsi.inner(upsi)
    return float(np.real(val)) / frame.s


def phi_time_derivative_fd(psi: WaveFunction, H: HamiltonianOp, f: SmoothFunction, frame: ConeFrame,
                           t: float, h: float = 1e-3) -> float:
    """Centered difference of ``t -> <Phi(t)>_t`` using the exact dynamics of a static ``H``."""

    plus = psi.with_values(exact_evolution(psi.values, H, h))
    minus = psi.with_values(exact_evolution(psi.values, H, -h))
    return (phi_expectation(plus, f, frame, t + h) - phi_expectation(minus, f, frame, t - h)) / (2 * h)


LEDGER_COLUMNS = ("t", "phi", "dphi_integrand", "cum_integral", "residual")


@dataclass
class BasicEqualityLedger:
    t: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    cumulative: np.ndarray = field(init=False)
    residual: np.ndarray = field(init=False)

    def __post_init__(self):
        cum = np.zeros_like(self.t)
        if len(self.t) > 1:
            cum[1:] = np.cumsum(0.5 * np.diff(self.t) * (self.dphi[1:] + self.dphi[:-1]))
        self.cumulative = cum
        self.residual = self.phi - cum - self.phi[0]

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def rows(self):
        return zip(self.t, self.phi, self.dphi, self.cumulative, self.residual)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LEDGER_COLUMNS)
            for row in self.rows():
                w.writerow([f"{x:.17g}" for x in row])


def basic_equality_run(psi0: WaveFunction, H: HamiltonianOp, f: FFunction, frame: ConeFrame, T: float,
                       config: PropagatorConfig | None = None) -> BasicEqualityLedger:
    """Evolve and tabulate ``<Phi_t>_t``, ``<D Phi_t>_t`` and the trapezoid residual."""

    def observe(t, psi):
        return {"phi": phi_expectation(psi, f, frame, t), "dphi": heisenberg_derivative(psi, f, frame, t)}

    rec = evolve(psi0, H, T, config, observe=observe)
    return BasicEqualityLedger(rec.times, rec.functionals["phi"], rec.functionals["dphi"])


@dataclass
class VelocityBoundReport:
    scales: np.ndarray
    lhs: np.ndarray
    k_term: np.ndarray
    tilde_term: np.ndarray
    constant: float
    k: float

    @property
    def margin(self) -> np.ndarray:
        return self.k_term + self.tilde_term - self.lhs

    @property
    def relative_slack(self) -> np.ndarray:
        rhs = self.k_term + self.tilde_term
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rhs > 0, self.margin / rhs, 0.0)

    @property
    def holds(self) -> bool:
        return bool(np.all(self.margin >= -1e-12))


def velocity_bound_check(psi: WaveFunction, g: SpectralCutoff, H: HamiltonianOp, f: FFunction,
                         frame: ConeFrame, t: float = 0.0, scales=(8, 16, 32, 64), k: float | None = None,
                         n: int = 2, max_power: int = 20) -> VelocityBoundReport:
    """Compare ``||p u g(H) psi||`` with ``k ||u g psi|| + s^-1 ||u~ g psi||``.

    ``u~^2 = C (u^2 + sum_{j<=n} s^-j (u^(j))^2)``; ``C`` is the smallest power
    of two for which the inequality holds at every scale.
    """
    from .funcalc import compute_k

    grid = psi.grid
    if k is None:
        k = compute_k(g, H).value
    gpsi = cutoff_apply(g, H, psi.values)
    lhs, kt, base = [], [], []
    for s in scales:
        fr = frame.with_scale(s)
        xs = frame_field(grid, fr, t).values
        ud = f.u_derivatives(xs, n)
        ug = ud[0] * gpsi
        pn = np.sqrt(sum(grid.norm(grid.ifft(kk * grid.fft(ug))) ** 2 for kk in grid.wavenumbers))
        lhs.append(float(pn))
        kt.append(k * float(grid.norm(ug)))
        tilde2 = ud[0] ** 2 + sum(s ** (-j) * ud[j] ** 2 for j in range(1, n + 1))
        base.append(float(grid.norm(np.sqrt(tilde2) * gpsi)) / s)
    lhs, kt, base = map(np.array, (lhs, kt, base))
    for e in range(max_power + 1):
        C = 2.0**e
        if np.all(kt + np.sqrt(C) * base - lhs >= -1e-12):
            break
    else:
        log.warning("velocity bound not met with C up to 2^%d", max_power)
    return VelocityBoundReport(np.asarray(scales, float), lhs, kt, np.sqrt(C) * base, C, k)


@dataclass
class AsymptoticCutoffResult:
    state: WaveFunction
    horizon: float
    differences: np.ndarray
    horizons: np.ndarray
    tail_estimate: float
    converged: bool


def _g_t(values, g, H, T, dt):
    fwd = evolve_values(values, H, 0.0, T, dt)
    return evolve_values(cutoff_apply(g, H.static(), fwd), H, T, 0.0, dt)


def asymptotic_cutoff_apply(g: SmoothFunction, H: HamiltonianOp, psi: WaveFunction, T_cap: float = 256.0,
                            tol: float = 1e-6, T0: float = 4.0, dt: float = 0.01) -> AsymptoticCutoffResult:
    """``g_T(H) psi = U_T^-1 g(H) U_T psi`` for ``T = T0, 2 T0, ...`` until Cauchy differences drop below ``tol``.

    The tail ``||g_+ psi - g_T psi||`` is estimated from the last difference
    assuming geometric decay at rate ``2^-mu``.
    """
    H.grid.check(psi.grid)
    if not H.is_time_dependent:
        out = cutoff_apply(g, H, psi.values)
        return AsymptoticCutoffResult(psi.with_values(out), 0.0, np.zeros(0), np.zeros(0), 0.0, True)
    mu = H.timedep.mu
    if mu <= 1:
        warnings.warn("mu <= 1: the cutoff limit exists but its tail is not certified", stacklevel=2)
    T = T0
    prev = _g_t(psi.values, g, H, T, dt)
    diffs, horizons = [], []
    converged = False
    while 2 * T <= T_cap:
        cur = _g_t(psi.values, g, H, 2 * T, dt)
        diffs.append(float(psi.grid.norm(cur - prev)))
        horizons.append(T)
        prev, T = cur, 2 * T
        if diffs[-1] < tol:
            converged = True
            break
    tail = diffs[-1] / (2.0**mu - 1.0) if diffs else float("inf")
    if not converged:
        warnings.warn(f"g_+ not converged at T_cap={T_cap}: last difference {diffs[-1] if diffs else float('nan'):.2e}",
                      CutoffNotConvergedWarning, stacklevel=2)
    return AsymptoticCutoffResult(psi.with_values(prev), T, np.array(diffs), np.array(horizons), tail, converged)


def cauchy_differences(g: SmoothFunction, H: HamiltonianOp, psi: WaveFunction, horizons,
                       dt: float = 0.01) -> tuple[np.ndarray, DecayFit | None]:
    """``||g_{2T} psi - g_T psi||`` per ``T`` and the log-log fit against ``T``."""
    T = np.asarray(horizons, dtype=float)
    vals = np.array([psi.grid.norm(_g_t(psi.values, g, H, 2 * t, dt) - _g_t(psi.values, g, H, t, dt))
                     for t in T])
    fit = fit_decay(T, vals) if len(T) >= 6 else None
    return vals, fit


@dataclass
class PullThroughReport:
    t: np.ndarray
    residual: np.ndarray
    fit: DecayFit | None
    envelope: float
    cutoff: AsymptoticCutoffResult


def pull_through_residual(g: SmoothFunction, H: HamiltonianOp, psi: WaveFunction, t_samples,
                          cutoff: AsymptoticCutoffResult | None = None, dt: float = 0.01,
                          **cutoff_kw) -> PullThroughReport:
    """``||U_t g_+ psi - g(H) U_t psi||`` over ``t`` with its decay fit and ``C t^-mu`` envelope."""
    if cutoff is None:
        cutoff = asymptotic_cutoff_apply(g, H, psi, dt=dt, **cutoff_kw)
    t = np.asarray(t_samples, dtype=float)
    a = cutoff.state.values
    b = psi.values
    res = []
    t_prev = 0.0
    for ti in t:
        if H.is_time_dependent:
            a = evolve_values(a, H, t_prev, ti, dt)
            b = evolve_values(b, H, t_prev, ti, dt)
        else:
            # splitting error would swamp the exact commutation
            a = exact_evolution(a, H, ti - t_prev)
            b = exact_evolution(b, H, ti - t_prev)
        t_prev = ti
        res.append(float(psi.grid.norm(a - cutoff_apply(g, H.static(), b))))
    res = np.array(res)
    mu = H.timedep.mu if H.is_time_dependent else 0.0
    envelope = float(np.max(res * t**mu)) if len(t) else 0.0
    fit = fit_decay(t, res) if len(t) >= 6 and np.count_nonzero(res > 1e-12) >= 6 else None
    return PullThroughReport(t, res, fit, envelope, cutoff)


@dataclass
class DensityReport:
    windows: list
    distances: np.ndarray
    tails: np.ndarray

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.distances) < 0))


def g_plus_density_check(windows, H: HamiltonianOp, psi: WaveFunction, **cutoff_kw) -> DensityReport:
    """``||g_{n,+}(H) psi - psi||`` for cutoffs equal to one on nested windows."""
    dists, tails, cuts = [], [], []
    for w in windows:
        g = w if isinstance(w, SpectralCutoff) else SpectralCutoff(*w)
        res = asymptotic_cutoff_apply(g, H, psi, **cutoff_kw)
        dists.append(float(psi.grid.norm(res.state.values - psi.values)))
        tails.append(res.tail_estimate)
        cuts.append(g)
    return DensityReport(cuts, np.array(dists), np.array(tails))
