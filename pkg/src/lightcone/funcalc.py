"""Functional calculus ``g(H)`` by eigendecomposition and by Helffer-Sjostrand.

Smooth scalar functions in this package expose ``derivatives(x, order)``,
returning an array of shape ``(order + 1, *x.shape)`` whose ``k``-th slice is
the ``k``-th derivative.  The almost-analytic extension and the commutator
expansion consume that interface.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import factorial

import numpy as np
import scipy.linalg

from . import _jets as jets
from .fitting import loglog_slope
from .grid import GridSpec, WaveFunction, japanese_bracket
from .hamiltonian import DenseHamiltonian, HamiltonianOp, TimeDepPotentialSpec, bracket_t

log = logging.getLogger(__name__)


class QuadratureError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class SmoothFunction:
    """Base for functions evaluable with exact derivatives."""

    def derivatives(self, x, order: int) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.derivatives(x, 0)[0]


@dataclass(frozen=True)
class SpectralCutoff(SmoothFunction):
    """Smooth window: support ``[lower, upper]``, plateau of ones inset by ``width``."""

    lower: float
    upper: float
    width: float = 0.05

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("transition width must be positive")
        if self.upper - self.lower < 2 * self.width:
            raise ValueError("window narrower than its two transitions")

    @property
    def support(self) -> tuple[float, float]:
        return (self.lower, self.upper)

    @property
    def plateau(self) -> tuple[float, float]:
        return (self.lower + self.width, self.upper - self.width)

    def derivatives(self, x, order: int) -> np.ndarray:
        k = max(order, 1)
        rise = jets.smoothstep(jets.variable(x, k, 1.0 / self.width, -self.lower / self.width))
        fall = jets.smoothstep(jets.variable(x, k, -1.0 / self.width, self.upper / self.width))
        return jets.to_derivatives(jets.mul(rise, fall))[: order + 1]

    def widened(self, width: float | None = None) -> "SpectralCutoff":
        """A cutoff equal to one on the whole support of ``self``."""
        w = self.width if width is None else width
        return SpectralCutoff(self.lower - w, self.upper + w, w)


@dataclass(frozen=True)
class Logistic(SmoothFunction):
    """``1 / (1 + exp(-(x - center) / scale))``: bounded, all derivatives bounded."""

    center: float = 0.0
    scale: float = 1.0

    def derivatives(self, x, order: int) -> np.ndarray:
        t = jets.variable(x, max(order, 1), 1.0 / self.scale, -self.center / self.scale)
        out = jets.reciprocal(jets.constant(1.0, t) + jets.exp(-t))
        return jets.to_derivatives(out)[: order + 1]


@dataclass(frozen=True)
class Constant(SmoothFunction):
    value: float = 1.0

    def derivatives(self, x, order: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros((order + 1,) + x.shape)
        out[0] = self.value
        return out


def _cutoff_tau(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``tau(s) = 1`` for ``|s| <= 1``, ``0`` for ``|s| >= 2``; returns tau and tau'."""
    d = jets.to_derivatives(jets.smoothstep(jets.variable(np.abs(s) - 1.0, 1)))
    return 1.0 - d[0], -d[1] * np.sign(s)


@dataclass
class AlmostAnalyticExtension:
    """Quadrature nodes and weights for ``f(A) = int d f~(z) (z - A)^-1``.

    ``f~(x+iy) = tau(y/Y0) sum_{k<=n+1} f^(k)(x) (iy)^k / k!`` on the tensor
    midpoint grid of spacing ``h`` covering ``support x [-2 Y0, 2 Y0]``.
    Nodes with zero weight are dropped.
    """

    f: SmoothFunction
    support: tuple[float, float]
    order: int = 1
    spacing: float = 0.0025
    y_scale: float = 0.25
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h, y0, n = self.spacing, self.y_scale, self.order
        lo, hi = self.support
        nx = max(1, int(round((hi - lo) / h)))
        hx = (hi - lo) / nx
        ny = max(2, 2 * int(round(2 * y0 / h)))
        hy = 4 * y0 / ny
        xs = lo + hx * (np.arange(nx) + 0.5)
        ys = -2 * y0 + hy * (np.arange(ny) + 0.5)
        dbar = self.dbar(xs[:, None], ys[None, :])
        w = -dbar * hx * hy / np.pi
        live = w != 0
        z = xs[:, None] + 1j * ys[None, :]
        self.nodes = z[live]
        self.weights = w[live]
        self._hx, self._hy = hx, hy
        log.debug("almost-analytic extension: %d live nodes (n=%d, h=%g)", live.sum(), n, h)

    def _taylor(self, x: np.ndarray, y: np.ndarray, upto: int) -> np.ndarray:
        d = self.f.derivatives(x, upto + 1)
        iy = 1j * y
        return d, sum(d[k] * iy**k / factorial(k) for k in range(upto + 1))

    def value(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        tau, _ = _cutoff_tau(y / self.y_scale)
        _, s = self._taylor(x, y, self.order + 1)
        return tau * s

    def dbar(self, x, y) -> np.ndarray:
        """Closed form of ``(d/dx + i d/dy) f~ / 2``."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        n = self.order
        tau, dtau = _cutoff_tau(y / self.y_scale)
        d, s = self._taylor(x, y, n + 1)
        top = d[n + 2] * (1j * y) ** (n + 1) / factorial(n + 1)
        return 0.5 * (tau * top + 1j * dtau / self.y_scale * s)

    def moment(self, p: float) -> float:
        """Quadrature of ``int |d f~(z)| |Im z|^(-p-1)``."""
        return float(np.sum(np.abs(self.weights) * np.pi * np.abs(self.nodes.imag) ** (-p - 1)))


class TridiagonalResolvent:
    """``(z - H)^-1`` via a one-off unitary reduction ``H = Q T Q*`` to tridiagonal ``T``.

    Each solve then costs ``O(N)``; pivots satisfy ``|d_i| >= |Im z|``.
    """

    def __init__(self, matrix: np.ndarray):
        t, q = scipy.linalg.hessenberg(matrix, calc_q=True)
        self.q = q
        self.diag = np.real(np.diag(t)).copy()
        self.sub = np.diag(t, -1).copy()
        self.sup = np.diag(t, 1).copy()

    def weighted_sum(self, z: np.ndarray, w: np.ndarray, rhs: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """``sum_m w_m (z_m - H)^-1 rhs`` for ``rhs`` of shape ``(N, B)``."""
        r = self.q.conj().T @ rhs
        acc = np.zeros_like(r, dtype=complex)
        for lo in range(0, len(z), chunk):
            acc += self._solve_sum(z[lo : lo + chunk], w[lo : lo + chunk], r)
        return self.q @ acc

    def _solve_sum(self, z, w, r):
        n = len(self.diag)
        lower, upper = -self.sub, -self.sup
        cp = np.empty((n, len(z)), dtype=complex)
        rp = np.empty((n, len(z), r.shape[1]), dtype=complex)
        d = z - self.diag[0]
        cp[0] = upper[0] / d if n > 1 else 0.0
        rp[0] = r[0][None, :] / d[:, None]
        for i in range(1, n):
            m = z - self.diag[i] - lower[i - 1] * cp[i - 1]
            if i < n - 1:
                cp[i] = upper[i] / m
            rp[i] = (r[i][None, :] - lower[i - 1] * rp[i - 1]) / m[:, None]
        x = rp
        for i in range(n - 2, -1, -1):
            x[i] = rp[i] - cp[i][:, None] * x[i + 1]
        return np.einsum("m,nmb->nb", w, x)


def _flat(values: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, tuple]:
    batch = values.shape[: values.ndim - grid.dim]
    return values.reshape(batch + (grid.size,)), batch


def _dense_of(H) -> DenseHamiltonian:
    if isinstance(H, DenseHamiltonian):
        return H
    return H.static().dense()


def cutoff_matrix(g: SmoothFunction, H) -> np.ndarray:
    """Dense ``g(H)`` from the eigendecomposition of the static part."""
    return _dense_of(H).function(g)


def cutoff_apply(g: SmoothFunction, H, values: np.ndarray) -> np.ndarray:
    """Raw-array ``g(H)``; free operators use the exact Fourier diagonalization."""
    if isinstance(H, HamiltonianOp) and H.static().is_free:
        grid = H.grid
        return grid.ifft(g(0.5 * grid.k_squared) * grid.fft(values))
    dense = _dense_of(H)
    w, v = dense.eigh
    flat, batch = _flat(values, dense.grid)
    coef = flat @ v.conj()
    out = (coef * g(w)) @ v.T
    return out.reshape(values.shape)


def spectral_apply(g: SmoothFunction, H, psi: WaveFunction) -> WaveFunction:
    """``sum_i g(lambda_i) <e_i, psi> e_i`` over the dense eigenbasis."""
    dense = _dense_of(H)
    w, v = dense.eigh
    out = v @ (g(w) * (v.conj().T @ psi.values.reshape(-1)))
    return psi.with_values(out.reshape(psi.grid.shape))


def hs_apply(g: SmoothFunction, H, psi: WaveFunction, order: int = 1, spacing: float = 0.0025,
             y_scale: float | None = None, tol: float | None = None,
             support: tuple[float, float] | None = None) -> WaveFunction:
    """Helffer-Sjostrand quadrature of ``g(H) psi`` with tridiagonal resolvent solves.

    With ``tol`` set, the result is compared against the same quadrature at
    twice the spacing and :class:`QuadratureError` is raised when they
    differ by more than ``tol`` in norm.
    """
    out = _hs_values(g, H, psi, order, spacing, y_scale, support)
    if tol is not None:
        coarse = _hs_values(g, H, psi, order, 2 * spacing, y_scale, support)
        resid = float(psi.grid.norm(out - coarse))
        if resid > tol:
            raise QuadratureError(f"quadrature not converged: residual {resid:.2e} > {tol:.2e}", resid)
    return psi.with_values(out)


def _support_of(g: SmoothFunction, support):
    if support is not None:
        return support
    if isinstance(g, SpectralCutoff):
        return g.support
    raise ValueError("support must be given for functions without compact support metadata")


def _default_y_scale(g: SmoothFunction) -> float:
    return 0.5 * g.width if isinstance(g, SpectralCutoff) else 0.25


def _hs_values(g, H, psi, order, spacing, y_scale, support):
    dense = _dense_of(H)
    ext = AlmostAnalyticExtension(g, _support_of(g, support), order, spacing,
                                  y_scale if y_scale is not None else _default_y_scale(g))
    solver = _resolvent_cache(dense)
    vec = psi.values.reshape(-1, 1)
    out = solver.weighted_sum(ext.nodes, ext.weights, vec)[:, 0]
    return out.reshape(psi.grid.shape)


_RESOLVENTS: dict = {}


def _resolvent_cache(dense: DenseHamiltonian) -> TridiagonalResolvent:
    key = id(dense)
    hit = _RESOLVENTS.get(key)
    if hit is None or hit[0] is not dense:
        hit = (dense, TridiagonalResolvent(dense.matrix))
        _RESOLVENTS[key] = hit
    return hit[1]


@dataclass
class SpeedConstant:
    value: float
    iterations: int
    converged: bool


def compute_k(g: SmoothFunction, H, tol: float = 1e-10, max_iter: int = 10_000,
              seed: int = 0) -> SpeedConstant:
    """``k = || |p| g(H) ||`` by power iteration on ``g(H) p^2 g(H)``."""
    op = H if isinstance(H, HamiltonianOp) else None
    grid = op.grid if op is not None else H.grid
    if op is not None and op.is_time_dependent:
        raise ValueError("compute_k needs a time-independent Hamiltonian")

    def apply(v):
        gv = cutoff_apply(g, H, v)
        return cutoff_apply(g, H, grid.ifft(grid.k_squared * grid.fft(gv)))

    rng = np.random.default_rng(seed)
    v = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    v /= np.linalg.norm(v)
    prev = None
    for it in range(1, max_iter + 1):
        w = apply(v)
        rq = float(np.real(np.vdot(v, w)))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return SpeedConstant(0.0, it, True)
        v = w / nw
        if prev is not None and abs(rq - prev) < tol * max(rq, 1e-300):
            return SpeedConstant(float(np.sqrt(max(rq, 0.0))), it, True)
        prev = rq
    log.warning("compute_k: power iteration hit the %d-step cap", max_iter)
    return SpeedConstant(float(np.sqrt(max(prev, 0.0))), max_iter, False)


@dataclass
class SharpWindowK:
    widths: np.ndarray
    values: np.ndarray
    limit: float


def sharp_window_k(H, lower: float, upper: float, widths=(0.2, 0.1, 0.05), **kw) -> SharpWindowK:
    """``k`` for smooth windows of shrinking transition width, extrapolated linearly to zero width."""
    widths = np.asarray(widths, dtype=float)
    ks = np.array([compute_k(SpectralCutoff(lower, upper, d), H, **kw).value for d in widths])
    slope, icpt = np.polyfit(widths, ks, 1)
    return SharpWindowK(widths, ks, float(icpt))


@dataclass
class CommutatorExpansion:
    order: int
    scale: float
    offset: float
    coefficients: list = field(repr=False)
    commutator: np.ndarray = field(repr=False)
    remainder: np.ndarray = field(repr=False)

    @property
    def remainder_norm(self) -> float:
        return float(np.linalg.norm(self.remainder, 2))

    @property
    def commutator_norm(self) -> float:
        return float(np.linalg.norm(self.commutator, 2))


def ad_powers(g: SmoothFunction, H, upto: int) -> list[np.ndarray]:
    """``[g(H), B_1, ..., B_upto]`` with ``B_k = ad^k_<x> g(H)``, ``ad_X A = [X, A]``."""
    dense = _dense_of(H)
    G = dense.function(g)
    jb = japanese_bracket(dense.grid).values.reshape(-1)
    diff = jb[:, None] - jb[None, :]
    return [G * diff**k for k in range(upto + 1)]


def commutator_expansion(g: SmoothFunction, H, f: SmoothFunction, offset: float, scale: float,
                         order: int, coefficients: list | None = None) -> CommutatorExpansion:
    """Expansion of ``[g(H), f(x_s)]`` with ``x_s = (<x> - offset) / scale``.

    The identity realized is
    ``[g(H), f(x_s)] = -sum_{k=1}^{n-1} s^-k / k! B_k f^(k)(x_s) + O(s^-n)``;
    the remainder is whatever is left after subtracting the sum.
    """
    if order < 1:
        raise ValueError("expansion order must be >= 1")
    B = coefficients if coefficients is not None else ad_powers(g, H, order - 1)
    grid = _dense_of(H).grid
    xs = (japanese_bracket(grid).values.reshape(-1) - offset) / scale
    d = f.derivatives(xs, order - 1)
    G = B[0]
    comm = G * d[0][None, :] - d[0][:, None] * G
    rem = comm.copy()
    for k in range(1, order):
        rem += scale ** (-k) / factorial(k) * B[k] * d[k][None, :]
    return CommutatorExpansion(order, scale, offset, B[1:order], comm, rem)


def b1_quadrature(g: SpectralCutoff, H, order: int = 1, spacing: float = 0.0025,
                  y_scale: float | None = None) -> np.ndarray:
    """``B_1 = int d g~(z) R(z) C_1 R(z)`` evaluated in the eigenbasis of ``H``."""
    dense = _dense_of(H)
    ext = AlmostAnalyticExtension(g, g.support, order, spacing,
                                  y_scale if y_scale is not None else _default_y_scale(g))
    w, v = dense.eigh
    jb = japanese_bracket(dense.grid).values.reshape(-1)
    X = np.diag(jb)
    C1 = X @ dense.matrix - dense.matrix @ X
    C1e = v.conj().T @ C1 @ v
    kern = np.zeros((len(w), len(w)), dtype=complex)
    for lo in range(0, len(ext.nodes), 2048):
        z = ext.nodes[lo : lo + 2048]
        r = 1.0 / (z[:, None] - w[None, :])
        kern += np.einsum("m,mi,mj->ij", ext.weights[lo : lo + 2048], r, r)
    return v @ (C1e * kern) @ v.conj().T


@dataclass
class CommutatorDecay:
    r: np.ndarray
    norms: np.ndarray
    slope: float
    obvious_bound: np.ndarray
    note: str = ("factorized W_r = <r>^-mu w(x): the commutator carries exactly the "
                 "<r>^-mu factor, so the measured slope is -mu rather than -mu-1")


def g_w_commutator_norm(g: SmoothFunction, H, W: TimeDepPotentialSpec, r_samples) -> CommutatorDecay:
    """``||[g(H), W_r]||`` over ``r`` with its log-log slope against ``<r>``."""
    dense = _dense_of(H)
    G = dense.function(g)
    r = np.asarray(r_samples, dtype=float)
    norms, bounds = [], []
    gsup = float(np.max(np.abs(g(dense.eigenvalues)))) if len(dense.eigenvalues) else 0.0
    for ri in r:
        w = W.values(dense.grid, ri).reshape(-1)
        comm = G * w[None, :] - w[:, None] * G
        norms.append(np.linalg.norm(comm, 2))
        bounds.append(2.0 * gsup * np.max(np.abs(w)))
    norms = np.array(norms)
    slope = loglog_slope(bracket_t(r), norms) if np.all(norms > 0) else float("nan")
    return CommutatorDecay(r, norms, slope, np.array(bounds))
