"""Power-law fits in log-log coordinates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOOR = 1e-12


class InsufficientPointsError(ValueError):
    pass


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass
class DecayFit:
    window: tuple[float, float]
    exponent: float
    prefactor: float
    r_squared: float
    n_points: int
    target: float | None = None
    tol: float = 0.0
    two_sided: bool = False

    @property
    def verdict(self) -> str:
        if self.target is None:
            return "flagged"
        if self.two_sided:
            ok = abs(self.exponent - self.target) <= self.tol
        else:
            ok = self.exponent <= self.target + self.tol
        return "pass" if ok else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def as_dict(self) -> dict:
        return {
            "window": list(self.window),
            "exponent": self.exponent,
            "prefactor": self.prefactor,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "target": self.target,
            "tol": self.tol,
            "two_sided": self.two_sided,
            "verdict": self.verdict,
        }


def fit_decay(times, values, window=None, target: float | None = None, tol: float = 0.0,
              floor: float = FLOOR, min_points: int = 6, two_sided: bool = False) -> DecayFit:
    """Fit ``values ~ C t^exponent`` over ``window``; points below ``floor`` are dropped.

    The verdict passes iff ``exponent <= target + tol``, or with ``two_sided``
    iff ``|exponent - target| <= tol``.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is None:
        window = (float(t.min()), float(t.max()))
    keep = (t >= window[0]) & (t <= window[1]) & (v >= floor) & (t > 0)
    if np.count_nonzero(keep) < min_points:
        raise InsufficientPointsError(
            f"{np.count_nonzero(keep)} usable points in window {window}, need {min_points}"
        )
    lx, ly = np.log(t[keep]), np.log(v[keep])
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit((float(window[0]), float(window[1])), float(slope), float(np.exp(icpt)),
                    float(r2), int(np.count_nonzero(keep)), target, tol, two_sided)
