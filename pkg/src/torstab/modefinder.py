"""Growing-mode search by continuation in the growth rate ``lambda``.

For each ``lambda > 0`` the reduced matrix ``M(lambda)`` couples the scalar
potential ``A_phi`` (all grid nodes) with the first ``n`` coefficients of
the divergence-free vector potential.  Its vector block is negative
definite, so for large ``lambda`` it has exactly ``n`` negative
eigenvalues; an unstable equilibrium gives at least ``n + 1`` for small
``lambda``.  The eigenvalue of index ``n`` therefore changes sign, and its
root ``lambda_0`` carries a null vector from which the mode is rebuilt:

    phi = -A1^-1 (B* A_phi + T1* h~)
    E   = -grad phi - lambda_0 A,   B = curl A
    f_s = s [mu_e (1 - Q) phi + R mu_p A_phi + mu_e Q(vhat . A)]

The rebuilt mode is checked against the discrete field equations and
against the weak form ``(lambda + D) g = lambda h`` of the linearized
Vlasov equation on a panel of smooth specular test functions.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq
from scipy.stats import norm, qmc

from .equilibrium import Equilibrium, invariants_at
from .geometry import angular_derivative, radial_derivative
from .operators import (
    DivFreeBasis,
    OperatorError,
    TrajectoryBackend,
    assemble_L,
    assemble_scalar_ops,
    assemble_vector_blocks,
    local_moments,
    reduced_matrix,
    vector_curl,
)
from .trajectories import build_seed_cache, to_meridional, to_toroidal, transport_field

logger = logging.getLogger(__name__)

__all__ = [
    "ModeSearchError",
    "ModeProblem",
    "GrowingMode",
    "negative_count",
    "find_crossing",
    "reconstruct_and_verify",
    "mode_fields",
    "maxwell_residual",
    "weak_vlasov_panel",
    "distribution_values",
]

SPECIES = (1, -1)


class ModeSearchError(RuntimeError):
    """No sign change on the scanned grid; ``guidance`` says which way to widen it."""

    def __init__(self, message, guidance="", table=None):
        super().__init__(message)
        self.guidance = guidance
        self.table = table or []


@dataclass
class _Level:
    opset: object
    blocks: object
    matrix: np.ndarray
    scale: np.ndarray
    eigenvalues: np.ndarray


class ModeProblem:
    """Operators of one equilibrium at any ``lambda > 0`` with a small cache.

    ``backend`` must be a trajectory backend built with vector rows.  The
    divergence-free basis holds ``n`` vectors unless one is passed in.
    """

    def __init__(self, eq: Equilibrium, profile, backend: TrajectoryBackend, n: int = 16,
                 basis: DivFreeBasis | None = None, cache_size: int = 3):
        if not getattr(backend, "with_vector", False):
            raise ValueError("the mode search needs a trajectory backend with vector rows")
        self.eq = eq
        self.profile = profile
        self.backend = backend
        self.n = int(n)
        self.basis = basis or DivFreeBasis.build(eq.grid, self.n)
        if self.basis.size < self.n:
            raise ValueError(f"basis has only {self.basis.size} vectors, {self.n} requested")
        self.moments = local_moments(eq, profile)
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    @property
    def grid(self):
        return self.eq.grid

    def level(self, lam: float) -> _Level:
        key = float(lam)
        if key <= 0:
            raise ValueError("lambda must be positive")
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        opset = assemble_scalar_ops(self.eq, self.profile, key, self.backend, moments=self.moments)
        assemble_L(opset)
        blocks = assemble_vector_blocks(opset, self.backend, self.basis, self.n)
        mat, scale = reduced_matrix(opset, blocks)
        vals = sla.eigvalsh(mat)
        lev = _Level(opset, blocks, mat, scale, vals)
        self._cache[key] = lev
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return lev

    def crossing_function(self, lam: float) -> float:
        """Eigenvalue of index ``n`` (the ``n+1``-th smallest) of ``M(lambda)``."""
        return float(self.level(lam).eigenvalues[self.n])


def negative_count(lam: float, problem: ModeProblem) -> dict:
    """Number of negative eigenvalues of ``M(lambda)`` with a spectrum summary.

    When the vector block ``U`` is negative definite the count is ``n`` plus
    the negatives of the scalar Schur complement ``L - V^T U^-1 V``;
    otherwise the raw eigenvalue count is returned with ``fallback`` set.
    """
    lev = problem.level(lam)
    raw = int(np.sum(lev.eigenvalues < 0))
    out = {"lambda": float(lam), "raw_count": raw, "smallest": lev.eigenvalues[: problem.n + 3].tolist(),
           "index_n_eigenvalue": float(lev.eigenvalues[problem.n]), "u_definite": lev.blocks.definite}
    if lev.blocks.definite:
        u = lev.blocks.U
        v = lev.blocks.V
        schur = lev.opset.forms["L"] - v.T @ np.linalg.solve(u, v)
        root = np.sqrt(lev.opset.weights)
        scaled = schur / np.outer(root, root)
        svals = sla.eigvalsh(0.5 * (scaled + scaled.T))
        out["count"] = problem.n + int(np.sum(svals < 0))
        out["schur_smallest"] = float(svals[0])
        out["fallback"] = False
        if out["count"] != raw:
            logger.info("Schur count %d differs from raw count %d at lambda %.4g", out["count"], raw, lam)
    else:
        out["count"] = raw
        out["fallback"] = True
    return out


def find_crossing(problem: ModeProblem, lam_grid=None, xtol: float = 1e-13) -> dict:
    """Bracket and refine the root of the index-``n`` eigenvalue in ``log lambda``.

    The largest-``lambda`` sign change on the grid is refined with Brent's
    method.  Returns the root, the bracket, the scan table and the
    metric-scaled null vector.
    """
    lam_grid = np.sort(np.asarray(np.logspace(-2, 2, 9) if lam_grid is None else lam_grid, dtype=float))
    if np.any(lam_grid <= 0):
        raise ValueError("the lambda grid must be positive")
    table = []
    for lam in lam_grid:
        rec = negative_count(lam, problem)
        table.append(rec)
    f = np.array([r["index_n_eigenvalue"] for r in table])
    change = [i for i in range(len(f) - 1) if f[i] < 0 <= f[i + 1]]
    if not change:
        if np.all(f < 0):
            guidance = "index-n eigenvalue negative on the whole grid: extend the grid to larger lambda"
        else:
            guidance = "index-n eigenvalue nonnegative on the whole grid: extend to smaller lambda or check the verdict"
        raise ModeSearchError("no sign change of the index-n eigenvalue on the lambda grid", guidance, table)
    i = change[-1]
    lo, hi = float(lam_grid[i]), float(lam_grid[i + 1])
    root = brentq(lambda t: problem.crossing_function(math.exp(t)), math.log(lo), math.log(hi), xtol=xtol)
    lam0 = math.exp(root)
    lev = problem.level(lam0)
    vals, vecs = sla.eigh(lev.matrix)
    idx = int(np.argmin(np.abs(vals)))
    x = vecs[:, idx]
    residual = float(np.linalg.norm(lev.matrix @ x) / np.linalg.norm(x))
    return {
        "lambda0": lam0,
        "bracket": (lo, hi),
        "count_low": table[i]["count"],
        "count_high": table[i + 1]["count"],
        "table": table,
        "null_vector": x,
        "null_residual": residual,
        "eigenvalue": float(vals[idx]),
    }


# ---------------------------------------------------------------- reconstruction


@dataclass
class GrowingMode:
    lam: float
    a_phi: np.ndarray = field(repr=False)
    coefficients: np.ndarray = field(repr=False)
    a_tilde: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    e_field: np.ndarray = field(repr=False)
    b_field: np.ndarray = field(repr=False)
    n: int = 0
    bracket: tuple = ()
    counts: tuple = ()
    null_residual: float = 0.0
    residuals: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    accepted: bool = False

    def summary(self, config_hash: str = "") -> dict:
        return {
            "config_hash": config_hash,
            "lambda0": self.lam,
            "truncation": self.n,
            "bracket": list(self.bracket),
            "negative_counts": list(self.counts),
            "null_residual": self.null_residual,
            "residuals": self.residuals,
            "norms": self.norms,
            "accepted": self.accepted,
        }

    def write_json(self, path, config_hash: str = ""):
        with open(path, "w") as fh:
            json.dump(self.summary(config_hash), fh, indent=2, default=float)

    def write_fields_csv(self, grid, path, config_hash: str = ""):
        rr, tt = grid.mesh()
        nx = grid.size
        cols = [rr, tt, self.phi, self.a_phi, self.a_tilde[:nx], self.a_tilde[nx:],
                *self.e_field, *self.b_field]
        header = "r,theta,phi,A_phi,A_r,A_theta,E_r,E_theta,E_phi,B_r,B_theta,B_phi"
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=f"config_hash={config_hash}\n{header}",
                   comments="# ")


def mode_fields(grid, lam: float, phi, a_phi, a_tilde):
    """Nodal ``E = -grad phi - lambda A`` and ``B = curl A`` (radial, angular, toroidal)."""
    rr, _ = grid.mesh()
    big_r = grid.major
    nx = grid.size
    d_r = radial_derivative(grid, parity=1, wall="dirichlet")
    d_t = angular_derivative(grid)
    a_r, a_t = a_tilde[:nx], a_tilde[nx:]
    e_field = np.stack([
        -(d_r @ phi) - lam * a_r,
        -(d_t @ phi) / rr - lam * a_t,
        -lam * a_phi,
    ])
    psi = big_r * a_phi
    b_field = np.stack([
        -(d_t @ psi) / (rr * big_r),
        (d_r @ psi) / big_r,
        vector_curl(grid, a_tilde),
    ])
    return e_field, b_field


def _w_norm_inv(x, w):
    return float(np.sqrt(np.sum(x * x / w)))


def maxwell_residual(lev: _Level, phi, a_phi, coeff) -> dict:
    """Componentwise relative residuals of the three discrete field equations.

    Each equation ``sum_i F_i x_i = 0`` is measured as
    ``||sum_i F_i x_i|| / || sum_i |F_i| |x_i| ||``, with the dual grid
    norm for the two scalar equations and the Euclidean norm on the basis
    coefficients for the vector equation.
    """
    forms = lev.opset.forms
    w = lev.opset.weights
    b = lev.blocks
    x = (phi, a_phi, coeff)
    rows = (
        ("poisson", (forms["A1"], forms["B"].T, b.T1.T), lambda r: _w_norm_inv(r, w)),
        ("toroidal", (forms["B"], forms["A2"], b.T2.T), lambda r: _w_norm_inv(r, w)),
        ("poloidal", (b.T1, b.T2, b.S), np.linalg.norm),
    )
    out = {}
    for name, mats, norm_ in rows:
        total = sum(m @ v for m, v in zip(mats, x))
        scale = norm_(sum(np.abs(m) @ np.abs(v) for m, v in zip(mats, x)))
        out[name] = float(norm_(total) / scale) if scale > 0 else 0.0
    out["max"] = max(out.values())
    return out


def _panel_points(m_log2: int, center, width: float, seed: int):
    """Quasi-random toroidal states for one velocity bump and its ``v_r`` mirror."""
    sob = qmc.Sobol(d=6, scramble=True, seed=seed).random_base2(m_log2)
    r = np.sqrt(sob[:, 0]) * (1.0 - 1e-9)
    th = 2.0 * np.pi * sob[:, 1]
    z = norm.ppf(np.clip(sob[:, 2:5], 1e-12, 1 - 1e-12))
    v = np.asarray(center, dtype=float)[None, :] + width * z
    v[sob[:, 5] < 0.5, 0] *= -1.0
    return np.column_stack([r, th, v])


def _bump(v, center, width):
    c = np.asarray(center, dtype=float)
    d1 = np.sum((v - c) ** 2, axis=1)
    vm = v.copy()
    vm[:, 0] *= -1.0
    d2 = np.sum((vm - c) ** 2, axis=1)
    return 0.5 * (np.exp(-0.5 * d1 / width**2) + np.exp(-0.5 * d2 / width**2))


PANEL_SHAPES = (
    lambda r, t: 1.0 - r * r,
    lambda r, t: (1.0 - r * r) * r * np.cos(t),
    lambda r, t: (1.0 - r * r) * r * np.sin(t),
    lambda r, t: (1.0 - r * r) * r * r * np.cos(2 * t),
)
PANEL_BUMPS = (((0.4, 0.0, 0.6), 0.7), ((0.3, -0.3, -0.6), 0.7))


def _panel_value(states, shape, center, width):
    return shape(states[:, 0], states[:, 1]) * _bump(states[:, 2:], center, width)


def _directional_derivative(fun, meridional, flow, step=1e-6):
    plus = to_toroidal(meridional + step * flow)
    minus = to_toroidal(meridional - step * flow)
    return (fun(plus) - fun(minus)) / (2.0 * step)


def _mode_rows(problem, states, species, lam, dt, sample_dt):
    """``Q_lambda`` rows and local rows of one species at toroidal states."""
    horizon = 40.0 / lam
    cache = build_seed_cache(states, species, problem.eq, ergodic_horizon=horizon, cache_horizon=horizon, dt=dt,
                             sample_dt=max(sample_dt, dt), with_vector=True)
    return cache.q_rows(lam), cache.local_rows(), cache.degenerate


def weak_vlasov_panel(problem: ModeProblem, lam: float, phi, a_phi, a_tilde, m_log2: int = 16,
                      chunk_log2: int = 13, seed: int = 7, dt: float | None = None,
                      sample_dt: float = 0.02) -> dict:
    """Weak-form Vlasov residuals of a mode on eight smooth specular test functions.

    For ``u = vhat . A - phi`` the reconstructed distribution satisfies
    ``g = s mu_e Q_lambda u`` and ``h = s mu_e u`` and should obey
    ``int g (lambda psi - D psi) = lambda int h psi`` for every test
    function ``psi`` and each species separately.  Each residual is the
    mismatch divided by the sum of the absolute integrands.  Points are
    processed in chunks of ``2**chunk_log2`` to bound memory.
    """
    eq = problem.eq
    prof = problem.profile
    dt = dt or min(0.01, 0.1 / lam)
    nx = eq.grid.size
    chunk = 2 ** min(chunk_log2, m_log2)
    out = []
    for b_idx, (center, width) in enumerate(PANEL_BUMPS):
        all_states = _panel_points(m_log2, center, width, seed + b_idx)
        for s in SPECIES:
            acc = np.zeros((len(PANEL_SHAPES), 2))
            for start in range(0, all_states.shape[0], chunk):
                states = all_states[start:start + chunk]
                big_r = eq.grid.a + states[:, 0] * np.cos(states[:, 1])
                # importance weight of the position and velocity proposal
                q_v = _bump(states[:, 2:], center, width) / (2 * np.pi * width**2) ** 1.5
                omega = np.pi * big_r / q_v / all_states.shape[0]
                rows, loc, bad = _mode_rows(problem, states, s, lam, dt, sample_dt)
                inv = invariants_at(states, eq)
                e, p = (inv[0], inv[1]) if s == 1 else (inv[2], inv[3])
                me = prof.mu_e(s, e, p)
                u_q = rows[:, 1, :nx] @ a_phi + rows[:, 2, :] @ a_tilde - rows[:, 0, :nx] @ phi
                u_l = loc[:, 1, :nx] @ a_phi + loc[:, 2, :] @ a_tilde - loc[:, 0, :nx] @ phi
                del rows, loc
                g = np.where(bad, 0.0, s * me * u_q)
                h = np.where(bad, 0.0, s * me * u_l)
                mer = to_meridional(states)
                flow = transport_field(mer, s, eq)
                for j, shape in enumerate(PANEL_SHAPES):
                    fun = lambda st, shape=shape: _panel_value(st, shape, center, width)
                    psi = fun(states)
                    dpsi = _directional_derivative(fun, mer, flow)
                    acc[j, 0] += np.sum(omega * (g * (lam * psi - dpsi) - lam * h * psi))
                    acc[j, 1] += np.sum(omega * (np.abs(g * lam * psi) + np.abs(g * dpsi) + np.abs(lam * h * psi)))
            for j in range(len(PANEL_SHAPES)):
                rel = abs(acc[j, 0]) / acc[j, 1] if acc[j, 1] > 0 else 0.0
                out.append({"species": s, "bump": b_idx, "shape": j, "mismatch": float(acc[j, 0]),
                            "scale": float(acc[j, 1]), "relative": float(rel)})
    return {"tests": out, "max": max(t["relative"] for t in out), "points_per_bump": 2**m_log2}


def distribution_values(problem: ModeProblem, lam: float, phi, a_phi, a_tilde, states, species: int,
                        dt: float | None = None, sample_dt: float = 0.02) -> np.ndarray:
    """Perturbed distribution ``f_s`` of a mode at toroidal phase-space states."""
    eq = problem.eq
    nx = eq.grid.size
    states = np.atleast_2d(np.asarray(states, dtype=float))
    rows, loc, _ = _mode_rows(problem, states, species, lam, dt or min(0.01, 0.1 / lam), sample_dt)
    inv = invariants_at(states, eq)
    e, p = (inv[0], inv[1]) if species == 1 else (inv[2], inv[3])
    _, me, mp = problem.profile.values(species, e, p)
    big_r = eq.grid.a + states[:, 0] * np.cos(states[:, 1])
    scalar = loc[:, 0, :nx] @ phi - rows[:, 0, :nx] @ phi
    interp_a = loc[:, 0, :nx] @ a_phi
    vec = rows[:, 1, :nx] @ a_phi + rows[:, 2, :] @ a_tilde
    return species * (me * scalar + big_r * mp * interp_a + me * vec)


def reconstruct_and_verify(problem: ModeProblem, crossing: dict, maxwell_tol: float = 1e-4,
                           vlasov_tol: float = 1e-3, panel: bool = True, panel_log2: int = 16) -> GrowingMode:
    """Rebuild potentials, fields and residual diagnostics from a null vector."""
    lam = float(crossing["lambda0"])
    lev = problem.level(lam)
    grid = problem.grid
    nx = grid.size
    w = grid.weights
    x = np.asarray(crossing["null_vector"], dtype=float)
    z = x * lev.scale
    a_phi, coeff = z[:nx], z[nx:]
    total = math.sqrt(float(np.sum(w * a_phi * a_phi))) + float(np.linalg.norm(coeff))
    if total == 0:
        raise OperatorError("zero null vector")
    a_phi, coeff = a_phi / total, coeff / total
    sign = 1.0 if a_phi[np.argmax(np.abs(a_phi))] >= 0 else -1.0
    a_phi, coeff = sign * a_phi, sign * coeff
    a_tilde = problem.basis.vectors[:, : problem.n] @ coeff
    phi = -lev.opset.a1_solve_form(lev.opset.forms["B"].T @ a_phi + lev.blocks.T1.T @ coeff)
    e_field, b_field = mode_fields(grid, lam, phi, a_phi, a_tilde)
    residuals = {"maxwell": maxwell_residual(lev, phi, a_phi, coeff)}
    y = np.concatenate([a_phi / lev.scale[:nx], coeff])
    residuals["reduced_form"] = float(y @ lev.matrix @ y / (y @ y))
    residuals["divergence"] = float(np.abs(problem.basis.divergence()[:, : problem.n] @ coeff).max())
    if panel:
        residuals["weak_vlasov"] = weak_vlasov_panel(problem, lam, phi, a_phi, a_tilde, m_log2=panel_log2)
    norms = {
        "a_phi_w": math.sqrt(float(np.sum(w * a_phi**2))),
        "coefficients": float(np.linalg.norm(coeff)),
        "phi_w": math.sqrt(float(np.sum(w * phi**2))),
        "sup_e": float(np.abs(e_field).max()),
        "sup_b": float(np.abs(b_field).max()),
    }
    accepted = (crossing["null_residual"] < 1e-6 and residuals["maxwell"]["max"] < maxwell_tol
                and (not panel or residuals["weak_vlasov"]["max"] < vlasov_tol))
    if not accepted:
        logger.warning("mode candidate at lambda %.5g rejected: %s", lam,
                       {k: (v["max"] if isinstance(v, dict) else v) for k, v in residuals.items()})
    return GrowingMode(lam, a_phi, coeff, a_tilde, phi, e_field, b_field, problem.n, tuple(crossing["bracket"]),
                       (crossing["count_low"], crossing["count_high"]), crossing["null_residual"], residuals,
                       norms, accepted)
