"""Uniform periodic grids, wavefunctions, spatial weights and regions.

All arrays on a grid of dimension ``d`` have the grid's shape ``(N,) * d`` as
their *trailing* axes; any leading axes are treated as a batch.  Inner
products and norms carry the cell volume ``dx**d`` so that they approximate
the continuum L2 quantities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import erfc


class GridMismatchError(ValueError):
    pass


class PacketTooWideError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Periodic grid with nodes ``x_j = -L + j * dx`` on each axis."""

    dim: int = 1
    extent: float = 80.0
    points: int = 512

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        n = self.points
        if n < 8 or n & (n - 1):
            raise ValueError(f"points must be a power of two >= 8, got {n}")
        if not self.extent > 0:
            raise ValueError("extent must be positive")

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / self.points

    @property
    def momentum_cutoff(self) -> float:
        return np.pi / self.spacing

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.dim

    @property
    def size(self) -> int:
        return self.points**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def axes(self) -> tuple[int, ...]:
        """Array axes (counted from the end) that carry the grid."""
        return tuple(range(-self.dim, 0))

    @cached_property
    def nodes(self) -> np.ndarray:
        return -self.extent + self.spacing * np.arange(self.points)

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.nodes] * self.dim), indexing="ij"))

    @cached_property
    def radius_squared(self) -> np.ndarray:
        return sum(c**2 for c in self.coords)

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        k = 2.0 * np.pi * np.fft.fftfreq(self.points, d=self.spacing)
        return tuple(np.meshgrid(*([k] * self.dim), indexing="ij"))

    @cached_property
    def k_squared(self) -> np.ndarray:
        return sum(k**2 for k in self.wavenumbers)

    def fft(self, values: np.ndarray) -> np.ndarray:
        return np.fft.fftn(values, axes=self.axes)

    def ifft(self, values: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(values, axes=self.axes)

    def inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """``<a, b>`` (antilinear in ``a``) reduced over the grid axes."""
        return np.sum(np.conj(a) * b, axis=self.axes) * self.cell_volume

    def norm(self, values: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(values) ** 2, axis=self.axes) * self.cell_volume)

    def check(self, other: "GridSpec") -> None:
        if other != self:
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")


@dataclass
class WaveFunction:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.grid.shape:
            raise GridMismatchError(
                f"values of shape {self.values.shape} on grid {self.grid.shape}"
            )

    def norm(self) -> float:
        return float(self.grid.norm(self.values))

    def momentum_norm(self) -> float:
        """Norm computed in Fourier space (Parseval)."""
        vk = self.grid.fft(self.values)
        return float(np.sqrt(np.sum(np.abs(vk) ** 2) * self.grid.cell_volume / self.grid.size))

    @property
    def is_normalized(self) -> bool:
        return abs(self.norm() - 1.0) <= 1e-12

    def normalized(self) -> "WaveFunction":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize the zero function")
        return WaveFunction(self.grid, self.values / n)

    def inner(self, other: "WaveFunction") -> complex:
        self.grid.check(other.grid)
        return complex(self.grid.inner(self.values, other.values))

    def conj(self) -> "WaveFunction":
        return WaveFunction(self.grid, np.conj(self.values))

    def with_values(self, values: np.ndarray) -> "WaveFunction":
        return WaveFunction(self.grid, values)

    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def mean_position(self) -> np.ndarray:
        rho = self.density() * self.grid.cell_volume
        return np.array([np.sum(c * rho) for c in self.grid.coords]) / np.sum(rho)

    def mean_momentum(self) -> np.ndarray:
        vk = self.grid.fft(self.values)
        w = np.abs(vk) ** 2
        return np.array([np.sum(k * w) for k in self.grid.wavenumbers]) / np.sum(w)

    def mean_p_squared(self) -> float:
        vk = self.grid.fft(self.values)
        w = np.abs(vk) ** 2
        return float(np.sum(self.grid.k_squared * w) / np.sum(w))


@dataclass
class SpatialWeight:
    grid: GridSpec
    values: np.ndarray

    def apply(self, psi: WaveFunction) -> WaveFunction:
        self.grid.check(psi.grid)
        return psi.with_values(self.values * psi.values)


@dataclass
class Region:
    """Outer ``<x> >= rho`` (kind ``"+"``) or inner ``<x> <= rho`` (``"-"``)."""

    grid: GridSpec
    kind: str
    radius: float
    mask: np.ndarray = field(repr=False)

    @property
    def node_count(self) -> int:
        return int(np.count_nonzero(self.mask))


def japanese_bracket(grid: GridSpec) -> SpatialWeight:
    return SpatialWeight(grid, np.sqrt(1.0 + grid.radius_squared))


def bracket_gradient(grid: GridSpec) -> tuple[np.ndarray, ...]:
    """Components of grad <x> = x / <x>."""
    jb = np.sqrt(1.0 + grid.radius_squared)
    return tuple(c / jb for c in grid.coords)


def region_indicator(grid: GridSpec, kind: str, rho: float) -> Region:
    if rho < 0:
        raise ValueError("region radius must be non-negative")
    jb = np.sqrt(1.0 + grid.radius_squared)
    if kind in ("+", "outer"):
        return Region(grid, "+", rho, jb >= rho)
    if kind in ("-", "inner"):
        # both kinds are closed, so they overlap only on nodes with <x> == rho
        return Region(grid, "-", rho, jb <= rho)
    raise ValueError(f"unknown region kind {kind!r}")


def mask_apply(psi: WaveFunction, region: Region) -> WaveFunction:
    region.grid.check(psi.grid)
    return psi.with_values(np.where(region.mask, psi.values, 0.0))


def probability_outside(psi: WaveFunction, rho: float) -> float:
    """Mass of ``psi`` in the closed outer region ``<x> >= rho``."""
    mask = np.sqrt(1.0 + psi.grid.radius_squared) >= rho
    return float(np.sum(np.abs(psi.values[mask]) ** 2) * psi.grid.cell_volume)


def gaussian_packet(grid: GridSpec, center=0.0, momentum=0.0, width: float = 1.0) -> WaveFunction:
    """Normalized Gaussian ``exp(-|x-x0|^2/(4 sigma^2) + i p0.x)``."""
    if not width > 0:
        raise ValueError("width must be positive")
    x0 = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))
    p0 = np.broadcast_to(np.asarray(momentum, dtype=float), (grid.dim,))
    # |psi|^2 is a normal density with standard deviation sigma per axis
    lo, hi = -grid.extent, grid.extent - grid.spacing
    z = np.sqrt(2.0) * width
    outside = 0.0
    for c in x0:
        axis_in = 1.0 - 0.5 * (erfc((hi - c) / z) + erfc((c - lo) / z))
        outside = 1.0 - (1.0 - outside) * axis_in
    if outside > 1e-12:
        raise PacketTooWideError(
            f"packet (sigma={width}) leaves mass {outside:.2e} outside the grid"
        )
    exponent = sum(
        -((c - a) ** 2) / (4.0 * width**2) + 1j * p * c
        for c, a, p in zip(grid.coords, x0, p0)
    )
    psi = WaveFunction(grid, np.exp(exponent))
    return psi.normalized()
