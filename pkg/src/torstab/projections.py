"""Kernel projections of the transport operators.

Homogeneous equilibria (no fields) admit a closed form: the projection of a
function ``h(r, theta)`` is a function of ``(e, p)`` equal to the average of
``h`` over the lens ``{y1 > c}`` of the unit disk with cut
``c = |p| / sqrt(e^2 - 1) - a`` and area measure ``r dr dtheta``.  In every
other case the projection is evaluated as a long-time average along the
characteristics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .geometry import CrossSectionGrid, interpolation_matrix
from .trajectories import PhaseState, ergodic_average

logger = logging.getLogger(__name__)

__all__ = [
    "LevelSetRegion",
    "lens_area",
    "lens_quadrature",
    "project_homogeneous",
    "HomogeneousProjector",
    "projected_vphi_norm",
    "PhaseSpaceSampler",
    "PhaseSample",
    "project_general",
]


def lens_area(c):
    """Area of ``{y in unit disk : y1 > c}``."""
    c = np.clip(np.asarray(c, dtype=float), -1.0, 1.0)
    return np.arccos(c) - c * np.sqrt(1.0 - c * c)


def lens_quadrature(c: float, n_r: int = 24, n_t: int = 32):
    """Polar quadrature ``(r, theta, weight)`` for the lens ``y1 > c``.

    The radial integral is split at ``|c|`` where the chord endpoints
    ``theta = +-arccos(c / r)`` appear, and the outer piece uses a square
    root map to absorb their singular derivative.  Weights include the
    factor ``r``.
    """
    c = float(c)
    if c >= 1.0:
        return np.empty(0), np.empty(0), np.empty(0)
    xg, wg = np.polynomial.legendre.leggauss(n_r)
    pieces = []
    edges = [0.0, 1.0] if c <= -1.0 or c == 0.0 else [0.0, abs(c), 1.0]
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo <= 0:
            continue
        u = 0.5 * (xg + 1.0)
        if lo > 0.0:
            # square-root map removes the chord-endpoint singularity at r = |c|
            r = lo + (hi - lo) * u * u
            wr = (hi - lo) * u * wg
        else:
            r = hi * u
            wr = 0.5 * hi * wg
        for rk, wk in zip(r, wr):
            if c <= -rk:
                th = (np.arange(n_t) + 0.5) * (2 * math.pi / n_t)
                wt = np.full(n_t, 2 * math.pi / n_t)
            elif c < rk:
                half = math.acos(c / rk)
                xt, wtt = np.polynomial.legendre.leggauss(n_t)
                th = half * xt
                wt = half * wtt
            else:
                continue
            pieces.append((np.full(th.size, rk), th, wk * rk * wt))
    if not pieces:
        return np.empty(0), np.empty(0), np.empty(0)
    r, th, w = (np.concatenate(p) for p in zip(*pieces))
    return r, np.mod(th, 2 * math.pi), w


@dataclass(frozen=True)
class LevelSetRegion:
    """The lens of cross-section points reachable at energy ``e`` and momentum ``p``."""

    e: float
    p: float
    a: float

    def __post_init__(self):
        if not self.e > 1.0:
            raise ValueError("energy must exceed 1")

    @property
    def cut(self) -> float:
        return abs(self.p) / math.sqrt(self.e * self.e - 1.0) - self.a

    @property
    def measure(self) -> float:
        return float(lens_area(self.cut))

    @property
    def is_empty(self) -> bool:
        return self.cut >= 1.0

    def mean(self, h, grid: CrossSectionGrid | None = None, n_r: int = 24, n_t: int = 32) -> float:
        """Area-weighted mean of ``h`` (callable of ``(r, theta)`` or grid function)."""
        if self.is_empty:
            raise ValueError("empty region: |p| >= (a + 1) sqrt(e^2 - 1)")
        r, th, w = lens_quadrature(self.cut, n_r, n_t)
        if callable(h):
            vals = np.asarray(h(r, th), dtype=float)
        else:
            if grid is None:
                raise ValueError("grid required for nodal h")
            vals = interpolation_matrix(grid, r, th) @ np.asarray(h, dtype=float)
        return float(np.dot(w, vals) / np.sum(w))


def project_homogeneous(h, e: float, p: float, a: float, grid: CrossSectionGrid | None = None) -> float:
    """Closed-form projection of ``h(r, theta)`` at ``(e, p)`` for a field-free equilibrium."""
    return LevelSetRegion(e, p, a).mean(h, grid)


class HomogeneousProjector:
    """Gram forms of the field-free projection on a grid.

    The phase space is parametrised by the cut ``c`` in ``(-1, 1)`` (lens
    regions) plus one full-disk bin, and by the energy ``e``.  For each cut
    node the class stores the lens mean rows of ``h`` and of ``h / R``.
    """

    def __init__(self, grid: CrossSectionGrid, n_cut: int = 64, n_sub_r: int = 24, n_sub_t: int = 32):
        self.grid = grid
        a = grid.a
        x, w = np.polynomial.legendre.leggauss(n_cut)
        # cluster nodes near c = 1 where the lens shrinks
        t = 0.5 * (x + 1.0)
        self.cuts = np.concatenate([[-1.0], -1.0 + 2.0 * (1.0 - (1.0 - t) ** 2)])
        self.cut_weights = np.concatenate([[0.0], 2.0 * 2.0 * (1.0 - t) * 0.5 * w])
        rows0, rows1 = [], []
        for c in self.cuts:
            r, th, wq = lens_quadrature(c, n_sub_r, n_sub_t)
            interp = interpolation_matrix(grid, r, th)
            wq = wq / wq.sum()
            rows0.append(interp.T @ wq)
            rows1.append(interp.T @ (wq / (a + r * np.cos(th))))
        self.mean_rows = np.array(rows0)
        self.mean_rows_over_r = np.array(rows1)
        self.areas = lens_area(self.cuts)

    def weights(self, profile, species: int, e_max: float = 60.0, n_e: int = 96, n_full: int = 32):
        """Per-cut weights ``(W00, W11, W10)`` of the Gram forms for one species.

        ``W00`` pairs mean rows, ``W11`` pairs momentum-weighted rows and
        ``W10`` is the mixed term; all include ``4 pi^2 |mu_e| m e de dp``.
        """
        a = self.grid.a
        tmax = math.acosh(e_max)
        tt = (np.arange(n_e) + 0.5) * tmax / n_e
        e = np.cosh(tt)
        k = np.sinh(tt)
        we = k * tmax / n_e
        out = np.zeros((3, self.cuts.size))
        # full-disk bin: c in [-a, -1]
        xf, wf = np.polynomial.legendre.leggauss(n_full)
        cf = -a + (a - 1.0) * 0.5 * (xf + 1.0)
        wcf = (a - 1.0) * 0.5 * wf
        for cuts, wc, slot in ((cf, wcf, None), (self.cuts[1:], self.cut_weights[1:], "lens")):
            for sgn in (1.0, -1.0):
                pp = sgn * (cuts[None, :] + a) * k[:, None]
                ee = np.broadcast_to(e[:, None], pp.shape)
                me = profile.mu_e(species, ee, pp)
                area = np.pi if slot is None else lens_area(cuts)[None, :]
                base = 4 * math.pi**2 * (-me) * area * ee * we[:, None] * k[:, None] * wc[None, :]
                kap = sgn * (cuts[None, :] + a) * k[:, None] / ee
                terms = np.stack([base.sum(0), (base * kap * kap).sum(0), (base * kap).sum(0)])
                if slot is None:
                    out[:, 0] += terms.sum(1)
                else:
                    out[:, 1:] += terms
        return out

    def gram(self, profile, species_list=(1, -1), **kw):
        """Return ``(G00, G11, G10)``: ``sum |P h|^2``, ``sum |P(vphi h)|^2`` and the mixed form."""
        w = sum(self.weights(profile, s, **kw) for s in species_list)
        m0, m1 = self.mean_rows, self.mean_rows_over_r
        g00 = (m0.T * w[0]) @ m0
        g11 = (m1.T * w[1]) @ m1
        g10 = (m1.T * w[2]) @ m0
        return g00, g11, g10


def projected_vphi_norm(h, profile, eq, mode: str = "homogeneous", species: int = -1, projector=None,
                        backend=None) -> float:
    """``||P(vhat_phi h)||_H^2`` for one species.

    ``mode='homogeneous'`` uses the closed form and requires a field-free
    equilibrium; ``mode='trajectory'`` uses the ergodic rows of a
    :class:`operators.TrajectoryBackend`.
    """
    h = np.asarray(h, dtype=float)
    if mode == "homogeneous":
        if not eq.is_field_free:
            raise ValueError("closed-form projection requires a field-free equilibrium")
        proj = projector or HomogeneousProjector(eq.grid)
        w = proj.weights(profile, species)
        vals = proj.mean_rows_over_r @ h
        return float(np.dot(w[1], vals * vals))
    if mode == "trajectory":
        if backend is None:
            raise ValueError("trajectory mode needs a backend")
        sp = backend.species_rows(species)
        vals = sp.rows(0.0)[:, 1, : h.size] @ h
        return float(np.dot(sp.weights, vals * vals))
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class PhaseSample:
    """Quasi-random phase points with quadrature weights for ``dx dv``."""

    states: np.ndarray
    weights: np.ndarray

    def mirrored(self):
        s = self.states.copy()
        s[:, 4] *= -1.0
        return PhaseSample(s, self.weights.copy())


class PhaseSpaceSampler:
    """Scrambled Sobol points on ``torus x ball(v_max)``.

    Positions are uniform in the cross-section area, speeds follow a radial
    density built from the profile envelope and directions are uniform.
    Each point carries the weight ``measure / proposal / N`` for the measure
    ``2 pi R r dr dtheta dv``.
    """

    def __init__(self, a: float, profile=None, v_max: float = 12.0, n_table: int = 400):
        self.a = float(a)
        self.v_max = float(v_max)
        s = np.linspace(0.0, v_max, n_table)
        if profile is None or profile.is_vacuum:
            env = np.exp(-np.sqrt(1.0 + s * s))
        else:
            env = profile.envelope(np.sqrt(1.0 + s * s), self.a)
            env = env + 1e-6 * env.max() * np.exp(-s)
        dens = s * s * env
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
        self._s = s
        self._dens = dens / cdf[-1]
        self._cdf = cdf / cdf[-1]

    def _speed(self, u):
        return np.interp(u, self._cdf, self._s)

    def density(self, s):
        return np.interp(s, self._s, self._dens)

    def sample(self, m: int, seed: int = 0) -> PhaseSample:
        """Draw ``2**m`` points."""
        u = qmc.Sobol(d=5, scramble=True, seed=seed).random_base2(m)
        r = np.sqrt(u[:, 0])
        th = 2 * math.pi * u[:, 1]
        speed = self._speed(u[:, 2])
        cz = 2.0 * u[:, 3] - 1.0
        sz = np.sqrt(np.clip(1.0 - cz * cz, 0.0, None))
        beta = 2 * math.pi * u[:, 4]
        v = speed[:, None] * np.stack([sz * np.cos(beta), sz * np.sin(beta), cz], axis=1)
        big_r = self.a + r * np.cos(th)
        q = np.maximum(self.density(speed), 1e-300)
        w = 2 * math.pi * big_r * math.pi * 4 * math.pi * speed**2 / q / u.shape[0]
        return PhaseSample(np.column_stack([r, th, v]), w)


def project_general(g, species: int, eq, points, horizon: float = 2000.0, dt: float = 1e-2, tol: float = 0.01):
    """Time-average projection of ``g`` at each phase point.

    ``points`` is an ``(N, 5)`` array of toroidal states.  Returns
    ``(values, diagnostics)``; a warning is logged when more than 5% of the
    points fail the half-horizon agreement check.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.empty(len(pts))
    ok = np.zeros(len(pts), dtype=bool)
    gaps = np.empty(len(pts))
    for k, st in enumerate(pts):
        seed = PhaseState(*st, species=species)
        vals[k], d = ergodic_average(g, seed, eq, horizon=horizon, dt=dt, tol=tol)
        ok[k] = d["converged"] and not d["degenerate"]
        gaps[k] = d["relative_gap"]
    frac = 1.0 - ok.mean() if len(pts) else 0.0
    if frac > 0.05:
        logger.warning("projection did not converge at %.1f%% of the points", 100 * frac)
    return vals, {"converged_fraction": float(ok.mean()) if len(pts) else 1.0, "gaps": gaps}
