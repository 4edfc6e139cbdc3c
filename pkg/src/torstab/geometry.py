"""Toroidal coordinates, cross-section grid, weighted inner products and
velocity-space quadrature.

The solid torus has minor radius 1 and major radius ``a > 1``.  A point is
written as ``x = ((a + r cos t) cos f, (a + r cos t) sin f, r sin t)`` with
``r`` the minor radius coordinate, ``t`` the poloidal angle and ``f`` the
toroidal angle.  Everything in this package is independent of ``f``, so grid
functions live on the ``(r, t)`` disk and carry the toroidal volume weight
``2 pi r (a + r cos t)``.

Grid functions are stored flattened with index ``k = i * n_theta + j`` where
``i`` counts radial nodes ``r_i = (i + 1/2) dr`` and ``j`` counts angular
nodes ``theta_j = j dtheta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

__all__ = [
    "ToroidalFrame",
    "CrossSectionGrid",
    "GridOperator",
    "VelocityQuadrature",
    "EnergyMomentumRule",
    "assemble_scalar_laplacian",
    "weighted_inner_product",
    "velocity_integrate",
    "radial_derivative",
    "angular_derivative",
    "interpolation_matrix",
    "lorentz_factor",
]


def lorentz_factor(v_r, v_theta, v_phi):
    """Return ``<v> = sqrt(1 + |v|^2)`` for momentum components."""
    return np.sqrt(1.0 + v_r * v_r + v_theta * v_theta + v_phi * v_phi)


@dataclass(frozen=True)
class ToroidalFrame:
    """Solid torus with unit minor radius and major radius ``a``."""

    a: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and self.a > 1.0):
            raise ValueError(f"major radius must satisfy a > 1, got {self.a!r}")

    @property
    def volume(self) -> float:
        return 2.0 * math.pi**2 * self.a

    def major_distance(self, r, theta):
        """Distance ``a + r cos(theta)`` from the symmetry axis."""
        return self.a + np.asarray(r) * np.cos(theta)

    def to_cartesian(self, r, theta, phi):
        big_r = self.major_distance(r, theta)
        return np.stack(
            [big_r * np.cos(phi), big_r * np.sin(phi), np.asarray(r) * np.sin(theta)],
            axis=-1,
        )

    def basis(self, theta, phi):
        """Unit vectors ``(e_r, e_theta, e_phi)`` as Cartesian 3-vectors."""
        theta = np.asarray(theta, dtype=float)
        phi = np.asarray(phi, dtype=float)
        ct, st = np.cos(theta), np.sin(theta)
        cp, sp_ = np.cos(phi), np.sin(phi)
        e_r = np.stack([ct * cp, ct * sp_, st], axis=-1)
        e_theta = np.stack([-st * cp, -st * sp_, ct], axis=-1)
        e_phi = np.stack([-sp_, cp, np.zeros_like(cp * ct)], axis=-1)
        return e_r, e_theta, e_phi


@dataclass(frozen=True)
class CrossSectionGrid:
    """Half-offset polar grid on the unit disk with toroidal cell weights."""

    frame: ToroidalFrame
    n_r: int
    n_theta: int
    r: np.ndarray = field(init=False, repr=False)
    theta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_r < 2 or self.n_theta < 4:
            raise ValueError("grid needs n_r >= 2 and n_theta >= 4")
        if self.n_theta % 2:
            raise ValueError("n_theta must be even so that the axis reflection maps nodes to nodes")
        dr = 1.0 / self.n_r
        object.__setattr__(self, "r", (np.arange(self.n_r) + 0.5) * dr)
        object.__setattr__(self, "theta", np.arange(self.n_theta) * (2.0 * math.pi / self.n_theta))
        if np.any(self.weights <= 0.0):
            raise ValueError("non-positive cell weights")

    @property
    def a(self) -> float:
        return self.frame.a

    @property
    def dr(self) -> float:
        return 1.0 / self.n_r

    @property
    def dtheta(self) -> float:
        return 2.0 * math.pi / self.n_theta

    @property
    def size(self) -> int:
        return self.n_r * self.n_theta

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_r, self.n_theta)

    def mesh(self):
        """Flattened nodal ``(r, theta)`` arrays."""
        rr, tt = np.meshgrid(self.r, self.theta, indexing="ij")
        return rr.ravel(), tt.ravel()

    @property
    def major(self) -> np.ndarray:
        """Nodal ``a + r cos(theta)``."""
        rr, tt = self.mesh()
        return self.a + rr * np.cos(tt)

    @property
    def weights(self) -> np.ndarray:
        rr, tt = self.mesh()
        return 2.0 * math.pi * rr * (self.a + rr * np.cos(tt)) * self.dr * self.dtheta

    @property
    def outer_ring(self) -> np.ndarray:
        """Boolean mask of nodes adjacent to the wall ``r = 1``."""
        mask = np.zeros(self.shape, dtype=bool)
        mask[-1, :] = True
        return mask.ravel()

    def index(self, i, j):
        return np.asarray(i) * self.n_theta + np.mod(j, self.n_theta)

    def refine(self, factor: int = 2) -> "CrossSectionGrid":
        return CrossSectionGrid(self.frame, self.n_r * factor, self.n_theta * factor)


@dataclass(frozen=True)
class GridOperator:
    """Linear operator on grid functions stored through its bilinear form.

    ``form`` is the symmetric (or general) matrix ``F`` with
    ``<M h, g>_w = g @ F @ h``; the operator itself is ``W^-1 F``.
    """

    form: np.ndarray
    weights: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return self.form / self.weights[:, None]

    def apply(self, h):
        return (self.form @ h) / self.weights

    def asymmetry(self) -> float:
        f = self.form
        scale = max(np.abs(f).max(), 1e-300)
        return float(np.abs(f - f.T).max() / scale)


def _stiffness(grid: CrossSectionGrid, coeff: Callable | None = None, wall: str = "dirichlet"):
    """Face-based stiffness matrix of ``int c |grad h|^2 dx`` on the grid.

    ``coeff(r, theta)`` multiplies the integrand (default 1).  The wall face
    contributes only for Dirichlet data.
    """
    nr, nt = grid.shape
    dr, dt, a = grid.dr, grid.dtheta, grid.a
    c = coeff if coeff is not None else (lambda r, t: np.ones_like(r * t))
    rows, cols, vals = [], [], []

    def add_pair(k1, k2, kappa):
        rows.extend([k1, k2, k1, k2])
        cols.extend([k1, k2, k2, k1])
        vals.extend([kappa, kappa, -kappa, -kappa])

    theta = grid.theta
    for i in range(nr - 1):
        rf = (i + 1) * dr
        kap = 2 * math.pi * rf * (a + rf * np.cos(theta)) * c(rf, theta) * dt / dr
        k1 = grid.index(i, np.arange(nt))
        k2 = grid.index(i + 1, np.arange(nt))
        for j in range(nt):
            add_pair(int(k1[j]), int(k2[j]), float(kap[j]))
    diag_extra = np.zeros(grid.size)
    if wall == "dirichlet":
        kap = 2 * math.pi * (a + np.cos(theta)) * c(1.0, theta) * dt / (0.5 * dr)
        diag_extra[grid.index(nr - 1, np.arange(nt))] += kap
    elif wall != "neumann":
        raise ValueError(f"unknown wall condition {wall!r}")
    tf = theta + 0.5 * dt
    for i in range(nr):
        ri = grid.r[i]
        kap = 2 * math.pi * (a + ri * np.cos(tf)) * c(ri, tf) * dr / (ri * dt)
        k1 = grid.index(i, np.arange(nt))
        k2 = grid.index(i, np.arange(nt) + 1)
        for j in range(nt):
            add_pair(int(k1[j]), int(k2[j]), float(kap[j]))
    s = sp.coo_matrix((vals, (rows, cols)), shape=(grid.size, grid.size)).tocsr()
    return (s + sp.diags(diag_extra)).tocsr()


def assemble_scalar_laplacian(grid: CrossSectionGrid, shifted: bool = False, dense: bool = True):
    """Dirichlet Laplacian on the cross-section in divergence form.

    Returns a :class:`GridOperator` for ``Delta`` (or ``Delta - 1/(a + r cos)^2``
    when ``shifted``).  The form is minus the face stiffness matrix, so the
    operator is exactly symmetric in the toroidal weight and ``-M`` is
    positive definite.
    """
    w = grid.weights
    if np.any(w <= 0):
        raise ValueError("non-positive grid weights")
    form = -_stiffness(grid)
    if shifted:
        form = form - sp.diags(w / grid.major**2)
    form = form.toarray() if dense else form.tocsr()
    return GridOperator(form=form, weights=w)


def weighted_inner_product(f, g, grid: CrossSectionGrid) -> float:
    """Toroidally weighted pairing ``sum_ij f_ij g_ij w_ij``."""
    f = np.asarray(f, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    if f.shape != g.shape or f.size != grid.size:
        raise ValueError(f"shape mismatch: {f.shape} vs {g.shape} on grid of size {grid.size}")
    return float(np.dot(f * g, grid.weights))


def _center_partner(grid: CrossSectionGrid, j):
    return np.mod(np.asarray(j) + grid.n_theta // 2, grid.n_theta)


def radial_derivative(grid: CrossSectionGrid, parity: int = 1, wall: str = "dirichlet"):
    """Central-difference ``d/dr`` on grid functions.

    Across the axis the value at ``(-r, theta)`` is ``parity`` times the value
    at ``(r, theta + pi)``.  At the wall the ghost value is ``-h`` for
    ``dirichlet`` (zero on ``r = 1``) and ``+h`` for ``neumann``.
    """
    nr, nt = grid.shape
    inv = 1.0 / (2.0 * grid.dr)
    rows, cols, vals = [], [], []
    js = np.arange(nt)
    for i in range(nr):
        k = grid.index(i, js)
        if i + 1 < nr:
            rows.append(k), cols.append(grid.index(i + 1, js)), vals.append(np.full(nt, inv))
        else:
            ghost = {"dirichlet": -1.0, "neumann": 1.0}[wall]
            rows.append(k), cols.append(k), vals.append(np.full(nt, ghost * inv))
        if i > 0:
            rows.append(k), cols.append(grid.index(i - 1, js)), vals.append(np.full(nt, -inv))
        else:
            rows.append(k), cols.append(grid.index(0, _center_partner(grid, js)))
            vals.append(np.full(nt, -parity * inv))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    ).tocsr()


def angular_derivative(grid: CrossSectionGrid):
    """Periodic central-difference ``d/dtheta``."""
    nr, nt = grid.shape
    inv = 1.0 / (2.0 * grid.dtheta)
    k = np.arange(grid.size)
    i, j = np.divmod(k, nt)
    rows = np.concatenate([k, k])
    cols = np.concatenate([grid.index(i, j + 1), grid.index(i, j - 1)])
    vals = np.concatenate([np.full(k.size, inv), np.full(k.size, -inv)])
    return sp.coo_matrix((vals, (rows, cols)), shape=(grid.size, grid.size)).tocsr()


def interpolation_matrix(grid: CrossSectionGrid, r, theta, parity: int = 1):
    """Sparse bilinear interpolation rows from nodal values to points.

    Points inside the innermost ring interpolate across the axis using the
    node at ``theta + pi`` (multiplied by ``parity``, which is ``-1`` for
    polar vector components).  Points beyond the last ring interpolate
    linearly to the Dirichlet value zero at ``r = 1``.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(r < 0) or np.any(r > 1 + 1e-12):
        raise ValueError("interpolation point outside the torus cross-section")
    nr, nt = grid.shape
    dr, dt = grid.dr, grid.dtheta
    npts = r.size
    tpos = np.mod(theta, 2 * math.pi) / dt
    j0 = np.floor(tpos).astype(int) % nt
    ft = tpos - np.floor(tpos)
    j1 = (j0 + 1) % nt
    s = r / dr - 0.5
    i0 = np.floor(s).astype(int)
    fr = s - i0
    rows, cols, vals = [], [], []
    pts = np.arange(npts)

    def emit(mask, ii, jj, wgt):
        rows.append(pts[mask]), cols.append(grid.index(ii[mask], jj[mask])), vals.append(wgt[mask])

    inner = i0 < 0
    mid = (i0 >= 0) & (i0 < nr - 1)
    outer = i0 >= nr - 1
    zero = np.zeros(npts, dtype=int)
    for jj, wt in ((j0, 1 - ft), (j1, ft)):
        # inside the first ring: mirrored node below, node 0 above
        emit(inner, zero, _center_partner(grid, jj), parity * (1 - fr) * wt)
        emit(inner, zero, jj, fr * wt)
        emit(mid, i0, jj, (1 - fr) * wt)
        emit(mid, i0 + 1, jj, fr * wt)
        lam = np.clip((r - grid.r[-1]) / (0.5 * dr), 0.0, 1.0)
        emit(outer, np.full(npts, nr - 1), jj, (1 - lam) * wt)
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(npts, grid.size),
    ).tocsr()


def _sinh_midpoints(v_max: float, n: int, half: bool = False):
    t_max = math.asinh(v_max)
    lo = 0.0 if half else -t_max
    h = (t_max - lo) / n
    t = lo + (np.arange(n) + 0.5) * h
    return np.sinh(t), np.cosh(t) * h


@dataclass(frozen=True)
class VelocityQuadrature:
    """Quadrature rule on the momentum ball ``|v| <= v_max``.

    ``tensor`` is a Cartesian product of sinh-mapped midpoint rules, valid
    for any integrand.  ``cylindrical`` integrates exactly over the angle
    around the ``v_phi`` axis and must only be used for integrands that
    depend on ``(v_r, v_theta)`` through ``v_r^2 + v_theta^2``; its nodes sit
    at ``v_theta = 0``.
    """

    kind: str
    v_max: float
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def tensor(cls, v_max: float = 12.0, n: int = 32):
        v, w = _sinh_midpoints(v_max, n)
        g1, g2, g3 = np.meshgrid(v, v, v, indexing="ij")
        w1, w2, w3 = np.meshgrid(w, w, w, indexing="ij")
        nodes = np.stack([g1.ravel(), g2.ravel(), g3.ravel()], axis=1)
        return cls("tensor", float(v_max), nodes, (w1 * w2 * w3).ravel())

    @classmethod
    def cylindrical(cls, v_max: float = 12.0, n_perp: int = 48, n_par: int = 96):
        vp, wp = _sinh_midpoints(v_max, n_perp, half=True)
        vz, wz = _sinh_midpoints(v_max, n_par)
        gp, gz = np.meshgrid(vp, vz, indexing="ij")
        wgp, wgz = np.meshgrid(2 * math.pi * vp * wp, wz, indexing="ij")
        nodes = np.stack([gp.ravel(), np.zeros(gp.size), gz.ravel()], axis=1)
        return cls("cylindrical", float(v_max), nodes, (wgp * wgz).ravel())

    @property
    def size(self) -> int:
        return self.weights.size

    def negated_vr(self) -> "VelocityQuadrature":
        nodes = self.nodes.copy()
        nodes[:, 0] *= -1.0
        return VelocityQuadrature(self.kind, self.v_max, nodes, self.weights)


def velocity_integrate(integrand, rule: VelocityQuadrature, profile=None, tol: float = 1e-8):
    """Integrate ``integrand(v_r, v_theta, v_phi)`` over the rule's ball.

    The integrand may return an array whose last axis runs over the nodes
    (for example one row per grid node); the result drops that axis.  When a
    profile is given the decay envelope is used to estimate the truncated
    tail and a warning is logged when it exceeds ``tol`` relative to the
    result.
    """
    v = rule.nodes
    vals = np.asarray(integrand(v[:, 0], v[:, 1], v[:, 2]), dtype=float)
    result = vals @ rule.weights
    if profile is not None:
        tail = profile.tail_bound(rule.v_max)
        scale = np.max(np.abs(result)) if np.size(result) else 0.0
        if scale > 0 and tail > tol * scale:
            logger.warning(
                "velocity cutoff %.3g leaves an estimated tail %.3e (relative %.2e)",
                rule.v_max, tail, tail / scale,
            )
    return result


@dataclass(frozen=True)
class EnergyMomentumRule:
    """Quadrature in energy ``e``, toroidal momentum ``p`` and gyro angle.

    At a point with major distance ``R`` the change of variables
    ``v_phi = p / R``, ``|v_tilde| = sqrt(e^2 - 1 - v_phi^2)``,
    ``(v_r, v_theta) = |v_tilde| (cos w, sin w)`` turns ``dv`` into
    ``e de dp dw / R``.  The reachable momenta ``|p| <= R sqrt(e^2 - 1)``
    are covered by Gauss-Legendre nodes in ``p / (R sqrt(e^2 - 1))``.
    """

    e_max: float
    n_e: int = 48
    n_p: int = 32
    n_omega: int = 16

    def nodes_at(self, big_r: float):
        t_max = math.acosh(self.e_max)
        h = t_max / self.n_e
        t = (np.arange(self.n_e) + 0.5) * h
        e = np.cosh(t)
        de = np.sinh(t) * h
        s, ws = np.polynomial.legendre.leggauss(self.n_p)
        om = (np.arange(self.n_omega) + 0.5) * (2 * math.pi / self.n_omega)
        wom = np.full(self.n_omega, 2 * math.pi / self.n_omega)
        ee, ss, oo = np.meshgrid(e, s, om, indexing="ij")
        dee, wss, woo = np.meshgrid(de, ws, wom, indexing="ij")
        span = big_r * np.sqrt(ee**2 - 1.0)
        p = span * ss
        dp = span * wss
        v_phi = p / big_r
        vt = np.sqrt(np.maximum(ee**2 - 1.0 - v_phi**2, 0.0))
        nodes = np.stack([(vt * np.cos(oo)).ravel(), (vt * np.sin(oo)).ravel(), v_phi.ravel()], axis=1)
        weights = (ee * dee * dp * woo / big_r).ravel()
        return nodes, weights, ee.ravel(), p.ravel()
