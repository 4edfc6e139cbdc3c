"""Quick invariant checks run by the ``selftest`` command.

Each check returns ``{"name", "ok", "value", "limit"}``; the suite takes
well under a minute on a single core.
"""

from __future__ import annotations

import logging
import math
import time

import numpy as np

from .equilibrium import invariants_at, solve_picard, vacuum_equilibrium
from .geometry import CrossSectionGrid, ToroidalFrame, _stiffness
from .operators import DivFreeBasis, HomogeneousBackend, assemble_L, assemble_scalar_ops
from .profiles import make_profile
from .stability import assess, smallest_eigenvalue
from .trajectories import PhaseState, integrate_reflecting, q_lambda_average

logger = logging.getLogger(__name__)

__all__ = ["run_selftest"]

BESSEL_J01_SQUARED = 2.404825557695773**2


def _check(name, value, limit, ok):
    return {"name": name, "ok": bool(ok), "value": float(value), "limit": float(limit)}


def _geometry():
    grid = CrossSectionGrid(ToroidalFrame(1000.0), 32, 32)
    lam, _ = smallest_eigenvalue(_stiffness(grid).toarray(), grid.weights)
    rel = abs(lam - BESSEL_J01_SQUARED) / BESSEL_J01_SQUARED
    small = CrossSectionGrid(ToroidalFrame(3.0), 16, 16)
    vol = abs(small.weights.sum() - small.frame.volume) / small.frame.volume
    return [_check("large-aspect Dirichlet eigenvalue", rel, 0.01, rel < 0.01),
            _check("torus volume quadrature", vol, 1e-3, vol < 1e-3)]


def _vacuum():
    grid = CrossSectionGrid(ToroidalFrame(3.0), 12, 12)
    rep = assess(vacuum_equilibrium(grid))
    return [_check("vacuum verdict is stable", rep.kappa, 0.0, rep.verdict == "stable" and rep.kappa > 0)]


def _trajectories():
    grid = CrossSectionGrid(ToroidalFrame(3.0), 12, 12)
    prof = make_profile("stable_even", tilt=0.5, c=0.2)
    eq = solve_picard(prof, grid, tol=1e-10)
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(4):
        seed = PhaseState(rng.uniform(0, 0.9), rng.uniform(0, 2 * math.pi), *rng.normal(0, 1.0, 3),
                          species=1 if k % 2 == 0 else -1)
        cache = integrate_reflecting(seed, eq, 10.0, dt=1e-3, sample_dt=0.05)
        inv = np.array(invariants_at(cache.states, eq))
        idx = (0, 1) if seed.species == 1 else (2, 3)
        worst = max(worst, float(np.abs(inv[list(idx)] - inv[list(idx)][:, :1]).max()))
    return [_check("invariant drift along reflected trajectories", worst, 1e-6, worst < 1e-6)]


def _q_lambda():
    grid = CrossSectionGrid(ToroidalFrame(3.0), 8, 8)
    eq = vacuum_equilibrium(grid)
    g = lambda s: np.cos(3 * s[:, 1]) * s[:, 0]
    seed = PhaseState(0.5, 1.0, 0.3, -0.2, 0.4)
    val = q_lambda_average(g, 0.5, seed, eq, dt=1e-2)
    return [_check("Q_lambda of a bounded function stays bounded", abs(val), 1.0, abs(val) <= 1.0 + 1e-12)]


def _operators():
    grid = CrossSectionGrid(ToroidalFrame(3.0), 12, 12)
    prof = make_profile("stable_even")
    eq = solve_picard(prof, grid)
    ops = assemble_scalar_ops(eq, prof, 0.0, HomogeneousBackend(eq, prof, n_cut=32))
    assemble_L(ops)
    w = grid.weights
    top = float(np.linalg.eigvalsh(ops.forms["A1"] / np.sqrt(np.outer(w, w))).max())
    b_rel = float(np.abs(ops.forms["B"]).max() / np.abs(ops.forms["A2"]).max())
    asym = max(ops.asymmetry["A2"], ops.asymmetry["L"])
    return [_check("A1 negative definite", top, 0.0, top < 0),
            _check("A2 and L symmetric", asym, 1e-8, asym < 1e-8),
            _check("B vanishes for a reflection-symmetric profile", b_rel, 1e-10, b_rel < 1e-10)]


def _basis():
    grid = CrossSectionGrid(ToroidalFrame(3.0), 12, 12)
    basis = DivFreeBasis.build(grid, 8)
    div = float(np.abs(basis.divergence()).max())
    orth = basis.orthonormality_error()
    return [_check("divergence-free basis", div, 1e-10, div < 1e-10),
            _check("basis orthonormal in the grid metric", orth, 1e-10, orth < 1e-10)]


SUITES = (_geometry, _vacuum, _trajectories, _q_lambda, _operators, _basis)


def run_selftest() -> dict:
    """Run every suite; a suite that raises is reported as a failed check."""
    checks = []
    t0 = time.perf_counter()
    for suite in SUITES:
        try:
            checks.extend(suite())
        except Exception as exc:  # reported, not raised: the summary must list every suite
            logger.exception("selftest suite %s failed", suite.__name__)
            checks.append({"name": suite.__name__.strip("_"), "ok": False, "value": float("nan"),
                           "limit": float("nan"), "error": repr(exc)})
    return {"passed": all(c["ok"] for c in checks), "checks": checks, "seconds": time.perf_counter() - t0}
