"""Self-consistent toroidal equilibria by Picard iteration.

The electric potential ``phi`` and the toroidal vector potential ``A`` solve

    -Delta phi = F1 = sum_s s * int mu_s(e_s, p_s) dv
    (-Delta + 1/R^2) A = F2 = sum_s s * int vhat_phi mu_s(e_s, p_s) dv

with zero Dirichlet data, where ``R = a + r cos(theta)``,
``e_s = <v> + s phi`` and ``p_s = R (v_phi + s A)``.  Each Picard step
evaluates the sources at the previous iterate and performs two linear
solves.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ._spline import SplinePotential
from .geometry import (
    CrossSectionGrid,
    VelocityQuadrature,
    angular_derivative,
    assemble_scalar_laplacian,
    radial_derivative,
)
from .profiles import MuProfile, validate_hypotheses

logger = logging.getLogger(__name__)

__all__ = [
    "Equilibrium",
    "EquilibriumError",
    "source_integrals",
    "solve_picard",
    "reconstruct_fields",
    "invariants_at",
    "vacuum_equilibrium",
    "auto_v_max",
    "write_equilibrium",
]

SPECIES = (1, -1)


class EquilibriumError(RuntimeError):
    """Picard failure; ``last`` holds the final iterate ``(phi, A)``."""

    def __init__(self, message, last=None, history=None):
        super().__init__(message)
        self.last = last
        self.history = history or []


def auto_v_max(profile: MuProfile, a: float = 3.0, rel: float = 1e-8, start: float = 12.0, cap: float = 60.0) -> float:
    """Smallest cutoff (from ``start`` in steps of 4) whose tail is below ``rel``."""
    if profile.is_vacuum:
        return start
    total = profile.tail_bound(0.0, a)
    v = start
    while v < cap and profile.tail_bound(v, a) > rel * total:
        v += 4.0
    return v


def default_rule(profile: MuProfile, a: float, n_perp: int = 48, n_par: int = 96) -> VelocityQuadrature:
    return VelocityQuadrature.cylindrical(auto_v_max(profile, a), n_perp, n_par)


def source_integrals(grid: CrossSectionGrid, phi, a_phi, profile: MuProfile, rule: VelocityQuadrature | None = None):
    """Nodal charge and toroidal current densities ``(F1, F2)``."""
    if profile.is_vacuum:
        z = np.zeros(grid.size)
        return z, z.copy()
    rule = rule or default_rule(profile, grid.a)
    phi = np.asarray(phi, dtype=float)
    a_phi = np.asarray(a_phi, dtype=float)
    big_r = grid.major
    v = rule.nodes
    gam = np.sqrt(1.0 + np.sum(v * v, axis=1))
    vhat_phi = v[:, 2] / gam
    f1 = np.zeros(grid.size)
    f2 = np.zeros(grid.size)
    for s in SPECIES:
        e = gam[None, :] + s * phi[:, None]
        p = big_r[:, None] * (v[None, :, 2] + s * a_phi[:, None])
        mu = profile.mu(s, e, p)
        f1 += s * (mu @ rule.weights)
        f2 += s * ((mu * vhat_phi[None, :]) @ rule.weights)
    return f1, f2


@dataclass
class Equilibrium:
    """Solved equilibrium: nodal potentials, fields, and diagnostics."""

    grid: CrossSectionGrid
    profile: MuProfile
    phi: np.ndarray
    a_phi: np.ndarray
    residual_phi: float = 0.0
    residual_a: float = 0.0
    iterations: int = 0
    contraction: float = 0.0
    history: list = field(default_factory=list)
    purely_magnetic: bool = False
    _splines: tuple | None = field(default=None, repr=False)

    @property
    def is_field_free(self) -> bool:
        return not (np.any(self.phi) or np.any(self.a_phi))

    @property
    def flux(self) -> np.ndarray:
        """Nodal ``R A``, the poloidal flux function."""
        return self.grid.major * self.a_phi

    def splines(self):
        """Smooth potentials ``(phi, R A)`` used by the particle pusher."""
        if self._splines is None:
            if self.is_field_free:
                self._splines = (SplinePotential.zero(), SplinePotential.zero())
            else:
                self._splines = (
                    SplinePotential.from_grid(self.grid, self.phi),
                    SplinePotential.from_grid(self.grid, self.flux),
                )
        return self._splines

    def fields(self):
        return reconstruct_fields(self)

    def summary(self) -> dict:
        e_f, b_f = reconstruct_fields(self)
        return {
            "residual_phi": self.residual_phi,
            "residual_a_phi": self.residual_a,
            "iterations": self.iterations,
            "contraction_ratio": self.contraction,
            "sup_phi": float(np.abs(self.phi).max()),
            "sup_a_phi": float(np.abs(self.a_phi).max()),
            "sup_e_field": float(np.abs(e_f).max()),
            "sup_b_field": float(np.abs(b_f).max()),
            "purely_magnetic": self.purely_magnetic,
            "profile": self.profile.describe(),
            "grid": {"a": self.grid.a, "n_r": self.grid.n_r, "n_theta": self.grid.n_theta},
        }


def vacuum_equilibrium(grid: CrossSectionGrid, profile: MuProfile | None = None) -> Equilibrium:
    from .profiles import make_profile

    z = np.zeros(grid.size)
    return Equilibrium(grid, profile or make_profile("vacuum"), z, z.copy())


def _weighted_norm(u, w):
    return float(np.sqrt(np.dot(u * u, w)))


def solve_picard(profile: MuProfile, grid: CrossSectionGrid, tol: float = 1e-10, max_iter: int = 200,
                 purely_magnetic: bool = False, damping: float = 1.0,
                 rule: VelocityQuadrature | None = None) -> Equilibrium:
    """Fixed-point iteration for the equilibrium potentials.

    Raises :class:`EquilibriumError` when the iteration diverges, leaves the
    ball ``sup |phi| <= 1/2`` or exhausts ``max_iter``.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    w = grid.weights
    if purely_magnetic:
        rep = validate_hypotheses(profile, grid.a)
        if not rep["reflection_symmetric"]["ok"]:
            raise EquilibriumError("purely magnetic mode needs a reflection-symmetric profile")
    if profile.is_vacuum:
        eq = vacuum_equilibrium(grid, profile)
        eq.iterations = 1
        eq.purely_magnetic = purely_magnetic
        return eq
    rule = rule or default_rule(profile, grid.a)
    stiff = sp.csc_matrix(-assemble_scalar_laplacian(grid, dense=False).form)
    shifted = sp.csc_matrix(stiff + sp.diags(w / grid.major**2))
    solve_phi = splu(stiff).solve
    solve_a = splu(shifted).solve
    phi = np.zeros(grid.size)
    a_phi = np.zeros(grid.size)
    history = []
    prev_step = None
    ratio = 0.0
    for it in range(1, max_iter + 1):
        f1, f2 = source_integrals(grid, phi, a_phi, profile, rule)
        new_phi = np.zeros(grid.size) if purely_magnetic else solve_phi(w * f1)
        new_a = solve_a(w * f2)
        new_phi = phi + damping * (new_phi - phi)
        new_a = a_phi + damping * (new_a - a_phi)
        step = max(np.abs(new_phi - phi).max(), np.abs(new_a - a_phi).max())
        if prev_step and prev_step > 0:
            ratio = step / prev_step
        history.append({"iteration": it, "step": float(step), "ratio": float(ratio)})
        phi, a_phi = new_phi, new_a
        if not np.all(np.isfinite(phi)) or not np.all(np.isfinite(a_phi)):
            raise EquilibriumError("Picard iterate is not finite", (phi, a_phi), history)
        if np.abs(phi).max() > 0.5:
            raise EquilibriumError(
                f"sup|phi| = {np.abs(phi).max():.3g} left the contraction ball", (phi, a_phi), history
            )
        if it > 5 and ratio > 1.0 and step > 1e3 * tol and step > history[0]["step"]:
            raise EquilibriumError(f"Picard iteration diverges (ratio {ratio:.3g})", (phi, a_phi), history)
        if step < tol:
            break
        prev_step = step
    else:
        raise EquilibriumError(f"no convergence in {max_iter} iterations (last step {step:.3e})", (phi, a_phi), history)
    f1, f2 = source_integrals(grid, phi, a_phi, profile, rule)
    lap = assemble_scalar_laplacian(grid, dense=False).form
    res_phi = 0.0 if purely_magnetic else _weighted_norm((-(lap @ phi)) / w - f1, w)
    res_a = _weighted_norm((shifted @ a_phi) / w - f2, w)
    contraction = float(np.median([h["ratio"] for h in history[1:]])) if len(history) > 2 else 0.0
    logger.info("equilibrium converged in %d iterations, contraction %.3g", it, contraction)
    return Equilibrium(grid, profile, phi, a_phi, res_phi, res_a, it, contraction, history, purely_magnetic)


def reconstruct_fields(eq: Equilibrium):
    """Nodal ``E = (E_r, E_theta)`` and ``B = (B_r, B_theta)``; ``B_phi = 0``."""
    g = eq.grid
    rr, _ = g.mesh()
    big_r = g.major
    d_r = radial_derivative(g, parity=1, wall="dirichlet")
    d_t = angular_derivative(g)
    e_r = -(d_r @ eq.phi)
    e_t = -(d_t @ eq.phi) / rr
    psi = big_r * eq.a_phi
    b_r = -(d_t @ psi) / (rr * big_r)
    b_t = (d_r @ psi) / big_r
    return np.stack([e_r, e_t]), np.stack([b_r, b_t])


def invariants_at(state, eq: Equilibrium):
    """Energies and toroidal momenta ``(e+, p+, e-, p-)`` at phase points.

    ``state`` holds ``(r, theta, v_r, v_theta, v_phi)`` along its last axis.
    """
    s = np.atleast_2d(np.asarray(state, dtype=float))
    r, th, vr, vt, vp = (s[:, k] for k in range(5))
    if np.any(r < 0) or np.any(r > 1 + 1e-9):
        raise ValueError("phase point outside the torus")
    big_r = eq.grid.a + r * np.cos(th)
    gam = np.sqrt(1 + vr * vr + vt * vt + vp * vp)
    sp_phi, sp_psi = eq.splines()
    y1, y2 = r * np.cos(th), r * np.sin(th)
    phi = sp_phi(y1, y2)[0]
    psi = sp_psi(y1, y2)[0]
    return gam + phi, big_r * vp + psi, gam - phi, big_r * vp - psi


def write_equilibrium(eq: Equilibrium, stem, config_hash: str = "") -> dict:
    """Write ``<stem>.csv`` with nodal potentials and fields and ``<stem>.json`` with the summary."""
    rr, tt = eq.grid.mesh()
    e_f, b_f = reconstruct_fields(eq)
    data = np.column_stack([rr, tt, eq.phi, eq.a_phi, e_f[0], e_f[1], b_f[0], b_f[1]])
    header = f"config_hash={config_hash}\nr,theta,phi,A_phi,E_r,E_theta,B_r,B_theta"
    np.savetxt(f"{stem}.csv", data, delimiter=",", header=header, comments="# ")
    summary = {"config_hash": config_hash, **eq.summary()}
    with open(f"{stem}.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=float)
    return summary
