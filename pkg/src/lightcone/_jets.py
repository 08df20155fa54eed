"""Truncated Taylor arithmetic for exact derivatives of smooth cutoffs.

A jet of order ``K`` at points ``x`` is an array ``c`` of shape
``(K + 1, *x.shape)`` holding normalized Taylor coefficients
``c[k] = f^(k)(x) / k!``.  Only the handful of operations needed to build
the ``exp(-1/t)`` family of compactly supported functions are provided.
"""
from __future__ import annotations

from math import factorial

import numpy as np

# exp(-1/t) and all of its first ~50 derivatives underflow below this.
FLAT_THRESHOLD = 1e-3


def variable(x, order: int, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
    """Jet of the affine map ``x -> scale * x + shift``."""
    x = np.asarray(x, dtype=float)
    c = np.zeros((order + 1,) + x.shape)
    c[0] = scale * x + shift
    if order >= 1:
        c[1] = scale
    return c


def constant(value: float, like: np.ndarray) -> np.ndarray:
    c = np.zeros_like(like)
    c[0] = value
    return c


def _dot(a: np.ndarray, b_rev: np.ndarray) -> np.ndarray:
    return np.einsum("j...,j...->...", a, b_rev)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    c = np.empty_like(a)
    for k in range(a.shape[0]):
        c[k] = _dot(a[: k + 1], b[k::-1])
    return c


def reciprocal(a: np.ndarray) -> np.ndarray:
    b = np.empty_like(a)
    b[0] = 1.0 / a[0]
    for k in range(1, a.shape[0]):
        b[k] = -b[0] * _dot(a[1 : k + 1], b[k - 1 :: -1])
    return b


def exp(a: np.ndarray) -> np.ndarray:
    e = np.empty_like(a)
    e[0] = np.exp(a[0])
    for k in range(1, a.shape[0]):
        j = np.arange(1, k + 1).reshape((-1,) + (1,) * (a.ndim - 1))
        e[k] = np.sum(j * a[1 : k + 1] * e[k - 1 :: -1], axis=0) / k
    return e


def flat_exp(t: np.ndarray) -> np.ndarray:
    """Jet of ``exp(-1/t)`` for ``t > 0`` and ``0`` otherwise."""
    live = t[0] > FLAT_THRESHOLD
    safe = np.where(live, t, 0.0)
    safe[0] = np.where(live, t[0], 1.0)
    out = exp(-reciprocal(safe))
    out[:, ~live] = 0.0
    return out


def smoothstep(t: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for t <= 0, 1 for t >= 1, monotone in between."""
    rise = flat_exp(t)
    fall = flat_exp(constant(1.0, t) - t)
    out = mul(rise, reciprocal(rise + fall))
    # rise / rise can miss 1 by an ulp; the plateau should be exact
    full = fall[0] == 0.0
    out[:, full] = 0.0
    out[0, full] = 1.0
    return out


def to_derivatives(c: np.ndarray) -> np.ndarray:
    """Convert Taylor coefficients to plain derivatives ``f^(k)``."""
    facts = np.array([float(factorial(k)) for k in range(c.shape[0])])
    return c * facts.reshape((-1,) + (1,) * (c.ndim - 1))
