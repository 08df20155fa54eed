"""Schrodinger operators ``H = p^2/2 + V`` and ``H_t = H + W_t`` on a grid.

The kinetic term is the Fourier multiplier ``|k|^2 / 2``; potentials act
pointwise.  ``dense_oracle`` materializes exactly the same discrete operator
as a Hermitian matrix for small grids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.optimize import nnls

from .fitting import loglog_slope
from .grid import GridSpec, WaveFunction

log = logging.getLogger(__name__)

DENSE_CAP = 4096

PRESETS = ("zero", "constant", "gaussian_well", "barrier", "soft_coulomb")


class SizeCapError(ValueError):
    pass


class KatoFitError(RuntimeError):
    pass


def _radial(preset: str, params: dict):
    """Return ``F, F', F''`` with ``V(x) = F(|x|^2)``."""
    if preset == "zero":
        zero = lambda q: np.zeros_like(q)  # noqa: E731
        return zero, zero, zero
    if preset == "constant":
        c0 = float(params.get("value", 0.0))
        return (lambda q: np.full_like(q, c0)), (lambda q: np.zeros_like(q)), (lambda q: np.zeros_like(q))
    if preset in ("gaussian_well", "barrier"):
        if preset == "gaussian_well":
            amp = -float(params.get("depth", 1.0))
        else:
            amp = float(params.get("height", 1.0))
        w2 = float(params.get("width", 1.0)) ** 2
        f0 = lambda q: amp * np.exp(-q / (2.0 * w2))  # noqa: E731
        return f0, (lambda q: -f0(q) / (2.0 * w2)), (lambda q: f0(q) / (4.0 * w2**2))
    if preset == "soft_coulomb":
        z = float(params.get("charge", 1.0))
        e2 = float(params.get("epsilon", 1.0)) ** 2
        return (
            lambda q: -z * (q + e2) ** -0.5,
            lambda q: 0.5 * z * (q + e2) ** -1.5,
            lambda q: -0.75 * z * (q + e2) ** -2.5,
        )
    raise ValueError(f"unknown potential preset {preset!r}; expected one of {PRESETS}")


@dataclass
class PotentialSpec:
    """Bounded radial potential preset with analytic derivatives up to order 2."""

    preset: str = "zero"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        _radial(self.preset, self.params)

    def values(self, grid: GridSpec) -> np.ndarray:
        return _radial(self.preset, self.params)[0](grid.radius_squared)

    def derivative(self, grid: GridSpec, alpha: tuple[int, ...] = ()) -> np.ndarray:
        """``d^alpha V`` for a multi-index given as a tuple of axis labels.

        ``()`` is ``V`` itself, ``(i,)`` is ``dV/dx_i`` and ``(i, j)`` the
        mixed second derivative.
        """
        f0, f1, f2 = _radial(self.preset, self.params)
        q = grid.radius_squared
        x = grid.coords
        if len(alpha) == 0:
            return f0(q)
        if len(alpha) == 1:
            return 2.0 * x[alpha[0]] * f1(q)
        if len(alpha) == 2:
            i, j = alpha
            out = 4.0 * x[i] * x[j] * f2(q)
            if i == j:
                out = out + 2.0 * f1(q)
            return out
        raise ValueError("only derivatives up to order 2 are available")

    def sup_norm(self, grid: GridSpec) -> float:
        return float(np.max(np.abs(self.values(grid))))



def multi_indices(dim: int, max_order: int = 2) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = [()]
    if max_order >= 1:
        out += [(i,) for i in range(dim)]
    if max_order >= 2:
        out += [(i, j) for i in range(dim) for j in range(i, dim)]
    return out


def bracket_t(t) -> np.ndarray:
    return np.sqrt(1.0 + np.asarray(t, dtype=float) ** 2)


@dataclass
class TimeDepPotentialSpec:
    """Factorized ``W(x, t) = <t>^(-mu) w(x)`` with a preset profile ``w``."""

    profile: PotentialSpec = field(default_factory=PotentialSpec)
    mu: float = 2.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("decay exponent mu must be positive")
        if self.mu <= 1:
            log.warning("mu=%s <= 1: the propagation theorems need mu > 1", self.mu)

    def factor(self, t: float) -> float:
        return float(bracket_t(t) ** (-self.mu))

    def values(self, grid: GridSpec, t: float) -> np.ndarray:
        return self.factor(t) * self.profile.values(grid)

    def derivative(self, grid: GridSpec, alpha: tuple[int, ...], t: float) -> np.ndarray:
        return self.factor(t) * self.profile.derivative(grid, alpha)


class HamiltonianOp:
    """``H = p^2/2 + V`` plus optional ``W_t``; immutable after construction."""

    def __init__(self, grid: GridSpec, potential: PotentialSpec | None = None,
                 timedep: TimeDepPotentialSpec | None = None):
        self.grid = grid
        self.potential = potential if potential is not None else PotentialSpec()
        self.timedep = timedep
        self.kinetic = 0.5 * grid.k_squared
        self.V = self.potential.values(grid)
        self.V.setflags(write=False)
        self._dense: dict = {}

    def __repr__(self):
        return f"HamiltonianOp({self.grid}, {self.potential}, timedep={self.timedep})"

    @property
    def is_free(self) -> bool:
        return self.timedep is None and not np.any(self.V)

    @property
    def is_time_dependent(self) -> bool:
        return self.timedep is not None

    def static(self) -> "HamiltonianOp":
        """The time-independent part ``H``."""
        if self.timedep is None:
            return self
        return HamiltonianOp(self.grid, self.potential)

    def potential_at(self, t: float | None) -> np.ndarray:
        if self.timedep is None:
            if t is not None:
                raise ValueError("time given for a time-independent Hamiltonian")
            return self.V
        if t is None:
            raise ValueError("time-dependent Hamiltonian needs a time")
        return self.V + self.timedep.values(self.grid, t)

    def apply(self, values: np.ndarray, t: float | None = None) -> np.ndarray:
        """Raw-array action; leading axes of ``values`` are a batch."""
        g = self.grid
        kin = g.ifft(self.kinetic * g.fft(values))
        return kin + self.potential_at(t) * values

    def apply_p_squared(self, values: np.ndarray) -> np.ndarray:
        g = self.grid
        return g.ifft(g.k_squared * g.fft(values))

    def dense(self, t: float | None = None) -> "DenseHamiltonian":
        key = None if t is None else float(t)
        if key not in self._dense:
            self._dense[key] = dense_oracle(self, t)
        return self._dense[key]


@dataclass
class DenseHamiltonian:
    grid: GridSpec
    matrix: np.ndarray

    @cached_property
    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        w, v = np.linalg.eigh(self.matrix)
        return w, v

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigh[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        return self.eigh[1]

    def matvec(self, values: np.ndarray) -> np.ndarray:
        flat = values.reshape(values.shape[: values.ndim - self.grid.dim] + (-1,))
        return (flat @ self.matrix.T).reshape(values.shape)

    def function(self, fn) -> np.ndarray:
        """Matrix of ``fn(H)`` from the eigendecomposition."""
        w, v = self.eigh
        return (v * fn(w)) @ v.conj().T

    def hermiticity_residual(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))


def dense_oracle(op: HamiltonianOp, t: float | None = None) -> DenseHamiltonian:
    g = op.grid
    if g.size > DENSE_CAP:
        raise SizeCapError(f"dense oracle limited to {DENSE_CAP} nodes, grid has {g.size}")
    eye = np.eye(g.size, dtype=complex).reshape((g.size,) + g.shape)
    cols = op.apply(eye, t).reshape(g.size, g.size)
    m = cols.T.copy()
    # kinetic FFT round-trip leaves ~1e-16 asymmetry
    m = 0.5 * (m + m.conj().T)
    return DenseHamiltonian(g, m)


def apply_h(op: HamiltonianOp, psi: WaveFunction, t: float | None = None) -> WaveFunction:
    op.grid.check(psi.grid)
    return psi.with_values(op.apply(psi.values, t))


def random_band_limited(grid: GridSpec, rng: np.random.Generator, k_max: float) -> np.ndarray:
    """Random complex field with Fourier support in ``|k| <= k_max``."""
    coef = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    coef = np.where(grid.k_squared <= k_max**2, coef, 0.0)
    return grid.ifft(coef)


class KatoFit(NamedTuple):
    a: float
    b: float


def kato_diagnostic(op: HamiltonianOp, samples: int = 200, seed: int = 0) -> KatoFit:
    """Fit a relative bound ``||V u|| <= a ||Delta u / 2|| + b ||u||``.

    Test functions are random band-limited fields, half of them localized by
    a Gaussian envelope at a random node, plus the grid delta at the maximum
    of ``|V|``.  A nonnegative least-squares fit is logged for reference; the
    returned pair is the lexicographically minimal envelope valid on every
    sample: smallest ``a`` first, then the smallest ``b`` for that ``a``.
    """
    if op.is_time_dependent:
        raise ValueError("kato_diagnostic acts on the time-independent part only")
    g = op.grid
    rng = np.random.default_rng(seed)
    V = op.V
    us = []
    for i in range(samples):
        k_max = g.momentum_cutoff * rng.uniform(0.05, 1.0)
        u = random_band_limited(g, rng, k_max)
        if i % 2:
            center = [rng.choice(g.nodes) for _ in range(g.dim)]
            width = rng.uniform(2 * g.spacing, g.extent / 2)
            r2 = sum((c - x0) ** 2 for c, x0 in zip(g.coords, center))
            u = u * np.exp(-r2 / (2 * width**2))
        us.append(u)
    spike = np.zeros(g.shape, dtype=complex)
    spike[np.unravel_index(np.argmax(np.abs(V)), g.shape)] = 1.0
    us.append(spike)
    U = np.array(us)
    y = g.norm(U)
    z = g.norm(V * U) / y
    x = g.norm(0.5 * op.apply_p_squared(U)) / y
    if np.all(z == 0):
        return KatoFit(0.0, 0.0)
    (a_ls, b_ls), _ = nnls(np.column_stack([x, np.ones_like(x)]), z)
    log.debug("kato nnls fit a=%.3g b=%.3g", a_ls, b_ls)
    # bounded sample set: a = 0 is always feasible, b is then the envelope
    a_fit, b_fit = 0.0, float(np.max(z))
    if not np.isfinite(b_fit) or a_fit >= 1:
        raise KatoFitError("no relative bound a < 1 fits the samples")
    return KatoFit(a_fit, b_fit)


@dataclass
class WtDecayReport:
    t: np.ndarray
    norms: dict
    slopes: dict
    mu: float
    tol: float = 0.05

    @property
    def passed(self) -> bool:
        live = [s for s in self.slopes.values() if np.isfinite(s)]
        return all(abs(s + self.mu) <= self.tol for s in live)


def wt_decay_check(spec: TimeDepPotentialSpec, grid: GridSpec, t_samples) -> WtDecayReport:
    """Log-log slope of ``sup_x |d^alpha W_t|`` against ``<t>`` for ``|alpha| <= 2``."""
    t = np.asarray(t_samples, dtype=float)
    norms, slopes = {}, {}
    for alpha in multi_indices(grid.dim):
        n = np.array([np.max(np.abs(spec.derivative(grid, alpha, ti))) for ti in t])
        norms[alpha] = n
        slopes[alpha] = loglog_slope(bracket_t(t), n) if np.all(n > 0) else float("nan")
    return WtDecayReport(t, norms, slopes, spec.mu)
