"""Spectral stability verdicts from the smallest eigenvalue of ``L``.

The verdict uses the smallest eigenvalue ``kappa`` of ``L`` at
``lambda = 0`` in the grid metric together with a witness test function:
the ground state of the Dirichlet Laplacian, scaled so that
``||grad h||^2 + ||h / R||^2 = 1``.  The witness value splits as

    <L h, h> = 1 + I + II + III + correction

with ``I = -sum int int p mu_p / <v> h^2`` (momentum gradient),
``II = sum s int int R A mu_p / <v> h^2`` (equilibrium field),
``III = sum ||P(vhat_phi h)||_H^2`` (projection) and the nonnegative
``correction = -<A1^-1 B* h, B* h>``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .equilibrium import Equilibrium, EquilibriumError, solve_picard
from .geometry import CrossSectionGrid, _stiffness
from .operators import (
    HomogeneousBackend,
    NullBackend,
    OperatorSet,
    TrajectoryBackend,
    assemble_L,
    assemble_scalar_ops,
    local_moments,
)
from .profiles import MuProfile, validate_hypotheses

logger = logging.getLogger(__name__)

__all__ = [
    "smallest_eigenvalue",
    "witness_function",
    "witness_decomposition",
    "StabilityReport",
    "default_backend",
    "assess",
    "scan_K",
    "config_hash",
]


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serialisable configuration."""
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def smallest_eigenvalue(form: np.ndarray, weights: np.ndarray, count: int = 1):
    """Smallest eigenvalue of ``W^-1 F`` and its ``w``-normalized eigenvector.

    Returns ``(kappa, h)``; with ``count > 1`` both are arrays.
    """
    form = np.asarray(form, dtype=float)
    w = np.asarray(weights, dtype=float)
    if form.shape != (w.size, w.size):
        raise ValueError("form and weights do not match")
    root = np.sqrt(w)
    scaled = form / np.outer(root, root)
    scaled = 0.5 * (scaled + scaled.T)
    try:
        vals, vecs = sla.eigh(scaled, subset_by_index=[0, count - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RuntimeError(f"eigensolve failed: {exc}") from exc
    vecs = vecs / root[:, None]
    vecs = vecs * np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    if count == 1:
        return float(vals[0]), vecs[:, 0]
    return vals, vecs


def witness_function(grid: CrossSectionGrid) -> np.ndarray:
    """Dirichlet ground state scaled to unit gradient-plus-curvature energy."""
    stiff = _stiffness(grid).toarray()
    _, h = smallest_eigenvalue(stiff, grid.weights)
    energy = h @ stiff @ h + np.sum(grid.weights * h * h / grid.major**2)
    return h / math.sqrt(energy)


def witness_decomposition(opset: OperatorSet, eq: Equilibrium, h: np.ndarray | None = None) -> dict:
    """Split ``<L h, h>`` at the witness into its named contributions."""
    g = opset.grid
    w = g.weights
    h = witness_function(g) if h is None else np.asarray(h, dtype=float)
    mom = opset.moments
    one = float(h @ opset.forms["stiffness"] @ h + np.sum(w * h * h / g.major**2))
    term_i = float(-np.sum(w * h * h * mom["p_mu_p"]))
    term_ii = float(np.sum(w * h * h * g.major * eq.a_phi * mom["s_mu_p"]))
    term_iii = float(h @ opset.grams[1] @ h)
    lform = opset.forms.get("L")
    if lform is None:
        lform = assemble_L(opset)
    correction = float(h @ opset.forms["L_correction"] @ h)
    value = float(h @ lform @ h)
    return {
        "form": value,
        "one": one,
        "I": term_i,
        "II": term_ii,
        "III": term_iii,
        "correction": correction,
        "sum": one + term_i + term_ii + term_iii + correction,
        "weighted_norm_R_h": float(np.sum(w * (g.major * h) ** 2)),
    }


def condition_small_field(eq: Equilibrium, moments: dict) -> dict:
    """Small-field sufficient condition with the discrete Poincare constant."""
    g = eq.grid
    lam1, _ = smallest_eigenvalue(_stiffness(g).toarray(), g.weights)
    c0 = 1.0 / math.sqrt(lam1)
    sup_a = float(np.abs(eq.a_phi).max())
    sup_int = float(np.max(moments["abs_mu_p"]))
    value = c0 * (1.0 + g.a) * sup_a * sup_int
    return {"poincare_constant": c0, "sup_a_phi": sup_a, "sup_momentum_integral": sup_int,
            "value": value, "ok": bool(value <= 1.0)}


@dataclass
class StabilityReport:
    kappa: float
    eigenvector: np.ndarray = field(repr=False)
    witness: dict
    verdict: str
    tol_eig: float
    margin: float
    hypotheses: dict
    small_field_condition: dict
    asymmetry: dict
    backend: dict
    config_hash: str = ""
    kappa_vacuum: float = 0.0
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("eigenvector")
        return json.loads(json.dumps(d, default=_jsonable))


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def default_backend(eq: Equilibrium, profile: MuProfile, **traj_kw):
    """Null backend in vacuum, closed form when field-free, trajectories otherwise."""
    if profile.is_vacuum:
        return NullBackend(eq.grid)
    if eq.is_field_free:
        return HomogeneousBackend(eq, profile)
    return TrajectoryBackend(eq, profile, with_vector=False, **traj_kw)


def default_tolerance(opset: OperatorSet, kappa_vacuum: float) -> float:
    """Deadband: a fixed fraction of the vacuum gap plus ten times the measured asymmetry."""
    scale = float(np.abs(opset.forms["L"] / np.sqrt(np.outer(opset.weights, opset.weights))).max())
    asym = max(opset.asymmetry.get("A2", 0.0), opset.asymmetry.get("L", 0.0))
    return 1e-3 * kappa_vacuum + 10.0 * asym * scale


def assess(eq: Equilibrium, profile: MuProfile | None = None, backend=None, tol_eig: float | None = None,
           hash_value: str = "", moments: dict | None = None) -> StabilityReport:
    """Verdict from ``L`` at ``lambda = 0`` with the witness decomposition."""
    profile = profile or eq.profile
    t0 = time.perf_counter()
    backend = backend or default_backend(eq, profile)
    opset = assemble_scalar_ops(eq, profile, 0.0, backend, moments=moments)
    lform = assemble_L(opset)
    t1 = time.perf_counter()
    kappa, h = smallest_eigenvalue(lform, eq.grid.weights)
    g = eq.grid
    vac = _stiffness(g).toarray() + np.diag(g.weights / g.major**2)
    kappa_vac, _ = smallest_eigenvalue(vac, g.weights)
    tol = tol_eig if tol_eig is not None else default_tolerance(opset, kappa_vac)
    if kappa > tol:
        verdict = "stable"
    elif kappa < -tol:
        verdict = "unstable"
    else:
        verdict = "marginal"
    witness = witness_decomposition(opset, eq)
    if witness["form"] < -tol and verdict != "unstable":
        logger.warning("witness form is negative while kappa is not; classifying as unstable")
        verdict = "unstable"
    hyp = {k: v for k, v in validate_hypotheses(profile, g.a, float(np.abs(eq.flux).max())).items()}
    report = StabilityReport(
        kappa=kappa,
        eigenvector=h,
        witness=witness,
        verdict=verdict,
        tol_eig=tol,
        margin=kappa + tol if verdict != "unstable" else kappa,
        hypotheses=hyp,
        small_field_condition=condition_small_field(eq, opset.moments),
        asymmetry=dict(opset.asymmetry),
        backend=opset.diagnostics or {"kind": opset.backend_kind},
        config_hash=hash_value,
        kappa_vacuum=kappa_vac,
        timings={"assembly_s": t1 - t0, "total_s": time.perf_counter() - t0},
    )
    return report


def scan_K(profile: MuProfile, k_values, grid: CrossSectionGrid, purely_magnetic: bool = True,
           tol: float = 1e-10, backend_factory=None) -> list[dict]:
    """Witness form and smallest eigenvalue along the momentum scaling ``K``.

    ``K = 0`` removes the momentum dependence.  Rows that fail to produce an
    equilibrium carry an ``error`` entry instead of numbers.
    """
    rows = []
    for k in k_values:
        row = {"K": float(k)}
        t0 = time.perf_counter()
        try:
            scaled = replace(profile, k=profile.k * float(k))
            eq = solve_picard(scaled, grid, tol=tol, purely_magnetic=purely_magnetic)
            backend = backend_factory(eq, scaled) if backend_factory else default_backend(eq, scaled)
            rep = assess(eq, scaled, backend=backend)
            row.update({
                "witness_form": rep.witness["form"],
                "one": rep.witness["one"],
                "I": rep.witness["I"],
                "II": rep.witness["II"],
                "III": rep.witness["III"],
                "kappa": rep.kappa,
                "sup_a_phi": float(np.abs(eq.a_phi).max()),
                "verdict": rep.verdict,
                "picard_iterations": eq.iterations,
            })
        except (EquilibriumError, RuntimeError, ValueError) as exc:
            row["error"] = str(exc)
            logger.warning("scan row K=%g failed: %s", k, exc)
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
    negative = [r["K"] for r in rows if r.get("witness_form", 1.0) < 0]
    if negative:
        logger.info("smallest scanned K with a negative witness form: %g", min(negative))
    return rows


def estimate_k0(rows: list[dict]):
    """Smallest scanned ``K`` with a negative witness form, or ``None``."""
    neg = [r["K"] for r in rows if r.get("witness_form", 1.0) < 0]
    return min(neg) if neg else None
