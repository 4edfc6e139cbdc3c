"""Uniform cubic B-spline potentials on the cross-section plane.

The equilibrium potentials are resampled onto a Cartesian square around the
unit disk and stored as cubic B-spline coefficients.  Forces are analytic
derivatives of the same spline, so the energy and angular momentum built
from the spline are exact invariants of the continuous characteristics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .geometry import CrossSectionGrid, interpolation_matrix


@numba.njit(cache=True, inline="always")
def _basis(t):
    """Cubic B-spline weights and derivatives for fractional offset t in [0, 1)."""
    t2 = t * t
    t3 = t2 * t
    w0 = (1.0 - t) ** 3 / 6.0
    w1 = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w2 = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w3 = t3 / 6.0
    d0 = -0.5 * (1.0 - t) ** 2
    d1 = 1.5 * t2 - 2.0 * t
    d2 = -1.5 * t2 + t + 0.5
    d3 = 0.5 * t2
    return w0, w1, w2, w3, d0, d1, d2, d3


@numba.njit(cache=True)
def spline_eval(coef, origin, h, y1, y2):
    """Value and gradient of a 2D cubic B-spline at ``(y1, y2)``."""
    u = (y1 - origin) / h
    v = (y2 - origin) / h
    iu = int(math.floor(u))
    iv = int(math.floor(v))
    a0, a1, a2, a3, da0, da1, da2, da3 = _basis(u - iu)
    b0, b1, b2, b3, db0, db1, db2, db3 = _basis(v - iv)
    wa = (a0, a1, a2, a3)
    dwa = (da0, da1, da2, da3)
    wb = (b0, b1, b2, b3)
    dwb = (db0, db1, db2, db3)
    val = 0.0
    g1 = 0.0
    g2 = 0.0
    for m in range(4):
        row = iu - 1 + m
        s0 = 0.0
        s1 = 0.0
        for n in range(4):
            c = coef[row, iv - 1 + n]
            s0 += wb[n] * c
            s1 += dwb[n] * c
        val += wa[m] * s0
        g1 += dwa[m] * s0
        g2 += wa[m] * s1
    return val, g1 / h, g2 / h


@dataclass(frozen=True)
class SplinePotential:
    """Cubic B-spline representation of a scalar field on the disk."""

    coef: np.ndarray
    origin: float
    h: float

    @classmethod
    def from_grid(cls, grid: CrossSectionGrid, values, spacing: float | None = None):
        values = np.asarray(values, dtype=float)
        h = spacing or 0.75 * grid.dr
        half = 1.0 + 4.0 * h
        n = int(math.ceil(2 * half / h)) + 1
        origin = -0.5 * (n - 1) * h
        ax = origin + h * np.arange(n)
        y1, y2 = np.meshgrid(ax, ax, indexing="ij")
        rho = np.hypot(y1, y2)
        ang = np.arctan2(y2, y1)
        inside = rho <= 1.0
        # odd reflection across the wall keeps the Dirichlet zero smooth
        rr = np.where(inside, rho, np.clip(2.0 - rho, 0.0, 1.0))
        sign = np.where(inside, 1.0, -1.0)
        interp = interpolation_matrix(grid, rr.ravel(), ang.ravel())
        samples = (sign.ravel() * (interp @ values)).reshape(n, n)
        coef = ndimage.spline_filter(samples, order=3, mode="mirror")
        return cls(np.ascontiguousarray(coef), float(origin), float(h))

    @classmethod
    def zero(cls):
        return cls(np.zeros((8, 8)), -1.75, 0.5)

    def __call__(self, y1, y2):
        y1 = np.atleast_1d(np.asarray(y1, dtype=float))
        y2 = np.atleast_1d(np.asarray(y2, dtype=float))
        out = np.empty((3, y1.size))
        for k in range(y1.size):
            out[:, k] = spline_eval(self.coef, self.origin, self.h, y1[k], y2[k])
        return out
