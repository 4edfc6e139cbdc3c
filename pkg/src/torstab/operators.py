"""Discrete stability operators on the cross-section grid.

Every operator is stored through its bilinear form ``F`` on nodal vectors:
``<M h, g>_w = g @ F @ h`` and ``M = W^-1 F`` with ``W = diag(w)``.  The
kinetic contributions split into a local part and a projected part.  The
local part is integrated at every node with a deterministic velocity rule,
except that the trajectory backend samples the ``mu_e`` pieces of ``A1``
and ``B`` at its own seeds so that they cancel the projected part exactly
as ``Q`` tends to the identity.  The projected part is always a Gram form

    <Q u, k>_H (symmetric part) = <Q u, Q k>_H,

which holds for the exponential averages ``Q`` and for the kernel
projection ``P`` because ``<Q u, u>_H = ||Q u||_H^2``.  Gram forms are
assembled from per-seed rows ``(Q h)(z) = row_z @ h`` and species weights
``C_z = omega_z |mu_e(z)|``, so the symmetric operators are symmetric to
rounding and the Dirichlet forms keep their sign.

Three projection backends are provided:

``NullBackend``         no particles
``HomogeneousBackend``  closed-form lens averages (field-free, ``lambda = 0``)
``TrajectoryBackend``   backward trajectories from quasi-random seeds
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .equilibrium import Equilibrium, auto_v_max, invariants_at
from .geometry import (
    CrossSectionGrid,
    GridOperator,
    VelocityQuadrature,
    _stiffness,
    angular_derivative,
    radial_derivative,
)
from .projections import HomogeneousProjector, PhaseSpaceSampler
from .trajectories import build_seed_cache

logger = logging.getLogger(__name__)

__all__ = [
    "OperatorError",
    "NullBackend",
    "HomogeneousBackend",
    "TrajectoryBackend",
    "local_moments",
    "OperatorSet",
    "assemble_scalar_ops",
    "assemble_L",
    "quadratic_form_A2",
    "DivFreeBasis",
    "VectorBlocks",
    "assemble_vector_blocks",
    "reduced_matrix",
    "minimizer_identity_check",
    "dump_operators",
]

SPECIES = (1, -1)
ASYMMETRY_LIMIT = 1e-6


class OperatorError(RuntimeError):
    """Assembly failure; ``spectrum`` carries the offending eigenvalues."""

    def __init__(self, message, spectrum=None):
        super().__init__(message)
        self.spectrum = spectrum


# ---------------------------------------------------------------- local velocity moments


def local_moments(eq: Equilibrium, profile, rule: VelocityQuadrature | None = None) -> dict:
    """Nodal velocity integrals used by the local operator terms.

    Keys (all sums over both species):

    ``mu_e``          ``int mu_e dv``
    ``vphi_mu_e``     ``int vhat_phi mu_e dv``
    ``r_mu_p``        ``int R mu_p dv``
    ``r_vphi_mu_p``   ``int R vhat_phi mu_p dv``
    ``p_mu_p``        ``int p_s mu_p / <v> dv``
    ``s_mu_p``        ``int s mu_p / <v> dv``
    ``abs_mu_p``      ``int (|mu_p+| + |mu_p-|) / <v> dv``
    """
    g = eq.grid
    keys = ("mu_e", "vphi_mu_e", "r_mu_p", "r_vphi_mu_p", "p_mu_p", "s_mu_p", "abs_mu_p")
    out = {k: np.zeros(g.size) for k in keys}
    if profile.is_vacuum:
        return out
    rule = rule or VelocityQuadrature.cylindrical(auto_v_max(profile, g.a), 48, 96)
    big_r = g.major[:, None]
    v = rule.nodes
    gam = np.sqrt(1.0 + np.sum(v * v, axis=1))[None, :]
    vphi_hat = v[None, :, 2] / gam[0][None, :]
    wq = rule.weights
    for s in SPECIES:
        e = gam + s * eq.phi[:, None]
        p = big_r * (v[None, :, 2] + s * eq.a_phi[:, None])
        _, me, mp = profile.values(s, e, p)
        out["mu_e"] += me @ wq
        out["vphi_mu_e"] += (me * vphi_hat) @ wq
        out["r_mu_p"] += (big_r * mp) @ wq
        out["r_vphi_mu_p"] += (big_r * vphi_hat * mp) @ wq
        out["p_mu_p"] += (p * mp / gam) @ wq
        out["s_mu_p"] += s * ((mp / gam) @ wq)
        out["abs_mu_p"] += (np.abs(mp) / gam) @ wq
    return out


# ---------------------------------------------------------------- projection backends


class NullBackend:
    """Backend for the vacuum profile: every projected term is zero."""

    kind = "none"
    supports_vector = True

    def __init__(self, grid: CrossSectionGrid):
        self.grid = grid

    def scalar_grams(self, lam: float):
        n = self.grid.size
        z = np.zeros((n, n))
        return z, z.copy(), z.copy()

    def vector_terms(self, lam: float, basis_vectors: np.ndarray):
        n = basis_vectors.shape[1]
        nx = self.grid.size
        return {"gram": np.zeros((n, n)), "t1": np.zeros((n, nx)), "t2": np.zeros((n, nx))}

    def diagnostics(self) -> dict:
        return {"kind": self.kind}


class HomogeneousBackend:
    """Closed-form kernel projections for a field-free equilibrium at ``lambda = 0``."""

    kind = "homogeneous"
    supports_vector = False

    def __init__(self, eq: Equilibrium, profile, projector: HomogeneousProjector | None = None, n_cut: int = 64):
        if not eq.is_field_free:
            raise ValueError("the closed-form backend requires a field-free equilibrium")
        self.grid = eq.grid
        self.profile = profile
        self.projector = projector or HomogeneousProjector(eq.grid, n_cut=n_cut)
        self._gram = None

    def scalar_grams(self, lam: float):
        if lam != 0:
            raise ValueError("the closed-form backend only provides the kernel projection (lambda = 0)")
        if self._gram is None:
            self._gram = self.projector.gram(self.profile, SPECIES)
        return self._gram

    def vector_terms(self, lam, basis_vectors):
        raise ValueError("vector blocks need the trajectory backend")

    def diagnostics(self) -> dict:
        return {"kind": self.kind, "n_cut": int(self.projector.cuts.size)}


@dataclass
class SpeciesSamples:
    """Seeds of one species with their H-weights and trajectory rows."""

    species: int
    states: np.ndarray
    weights: np.ndarray
    cache: object
    _local: np.ndarray | None = field(default=None, repr=False)

    def rows(self, lam: float) -> np.ndarray:
        return self.cache.q_rows(lam)

    @property
    def local(self) -> np.ndarray:
        if self._local is None:
            self._local = self.cache.local_rows()
        return self._local


class TrajectoryBackend:
    """Projections from backward trajectories of quasi-random phase-space seeds.

    Ion seeds are scrambled Sobol points; electron seeds are their mirror
    images in ``v_phi``.  ``Q_lambda`` rows combine the cached samples with
    the ergodic average for the part of the exponential weight beyond the
    cache horizon.
    """

    kind = "trajectory"
    supports_vector = True

    def __init__(self, eq: Equilibrium, profile, seeds_log2: int = 11, seed: int = 0,
                 ergodic_horizon: float = 200.0, cache_horizon: float = 40.0, dt: float = 1e-2,
                 sample_dt: float = 0.05, with_vector: bool = True, v_max: float | None = None):
        self.grid = eq.grid
        self.eq = eq
        self.profile = profile
        self.with_vector = with_vector
        self.settings = {"seeds_log2": seeds_log2, "seed": seed, "ergodic_horizon": ergodic_horizon,
                         "cache_horizon": cache_horizon, "dt": dt, "sample_dt": sample_dt}
        v_max = v_max or min(auto_v_max(profile, eq.grid.a), 24.0)
        sample = PhaseSpaceSampler(eq.grid.a, profile, v_max=v_max).sample(seeds_log2, seed)
        self.species = {}
        self._local_grams = None
        for s, smp in ((1, sample), (-1, sample.mirrored())):
            cache = build_seed_cache(smp.states, s, eq, ergodic_horizon=ergodic_horizon,
                                     cache_horizon=cache_horizon, dt=dt, sample_dt=sample_dt,
                                     with_vector=with_vector)
            inv = invariants_at(smp.states, eq)
            e, p = (inv[0], inv[1]) if s == 1 else (inv[2], inv[3])
            c = smp.weights * np.abs(profile.mu_e(s, e, p))
            c[cache.degenerate] = 0.0
            self.species[s] = SpeciesSamples(s, smp.states, c, cache)

    def species_rows(self, species: int) -> SpeciesSamples:
        return self.species[species]

    def _scalar_rows(self, sp_: SpeciesSamples, lam: float):
        nx = self.grid.size
        rows = sp_.rows(lam)
        return rows[:, 0, :nx], rows[:, 1, :nx]

    def scalar_grams(self, lam: float):
        nx = self.grid.size
        g00 = np.zeros((nx, nx))
        g11 = np.zeros((nx, nx))
        g10 = np.zeros((nx, nx))
        for sp_ in self.species.values():
            q0, q1 = self._scalar_rows(sp_, lam)
            c = sp_.weights[:, None]
            g00 += q0.T @ (c * q0)
            g11 += q1.T @ (c * q1)
            g10 += q1.T @ (c * q0)
        return g00, g11, g10

    def local_grams(self):
        """Seed-sampled local forms ``(sum I0^T C I0, sum I1^T C I0)``.

        Pairing these with the projected Grams keeps ``1 - Q`` exactly zero
        seed by seed as ``Q`` tends to the identity.
        """
        if self._local_grams is None:
            nx = self.grid.size
            d00 = np.zeros((nx, nx))
            d10 = np.zeros((nx, nx))
            for sp_ in self.species.values():
                loc = sp_.local
                c = sp_.weights[:, None]
                i0, i1 = loc[:, 0, :nx], loc[:, 1, :nx]
                d00 += i0.T @ (c * i0)
                d10 += i1.T @ (c * i0)
            self._local_grams = (d00, d10)
        return self._local_grams

    def vector_terms(self, lam: float, basis_vectors: np.ndarray):
        """Projected vector forms for the columns of ``basis_vectors``.

        Returns ``gram = sum ||Q(vhat . h~)||_H^2`` pairings (``n x n``) and
        the basis rows ``t1``, ``t2`` (``n x N``) of the mixed forms.
        """
        if not self.with_vector:
            raise ValueError("backend was built without vector rows")
        nx = self.grid.size
        n = basis_vectors.shape[1]
        gram = np.zeros((n, n))
        t1 = np.zeros((n, nx))
        t2 = np.zeros((n, nx))
        for sp_ in self.species.values():
            rows = sp_.rows(lam)
            loc = sp_.local
            c = sp_.weights[:, None]
            qv = rows[:, 2, :] @ basis_vectors
            iv = loc[:, 2, :] @ basis_vectors
            q0, q1 = rows[:, 0, :nx], rows[:, 1, :nx]
            i0, i1 = loc[:, 0, :nx], loc[:, 1, :nx]
            gram += qv.T @ (c * qv)
            t1 += 0.5 * (iv.T @ (c * q0) - qv.T @ (c * i0))
            t2 -= 0.5 * (iv.T @ (c * q1) - qv.T @ (c * i1))
        return {"gram": gram, "t1": t1, "t2": t2}

    def diagnostics(self) -> dict:
        out = {"kind": self.kind, **self.settings}
        for s, sp_ in self.species.items():
            out[f"species_{s:+d}"] = {
                "seeds": int(sp_.weights.size),
                "degenerate": int(sp_.cache.degenerate.sum()),
                "max_bounces": int(sp_.cache.bounces.max(initial=0)),
                "unconverged_fraction": sp_.cache.convergence_failures(),
            }
        return out


# ---------------------------------------------------------------- scalar operators


def _symmetrize(form: np.ndarray, name: str, report: dict) -> np.ndarray:
    scale = max(float(np.abs(form).max()), 1e-300)
    asym = float(np.abs(form - form.T).max()) / scale
    report[name] = asym
    if asym > ASYMMETRY_LIMIT:
        raise OperatorError(f"{name} asymmetry {asym:.2e} exceeds {ASYMMETRY_LIMIT:g}")
    return 0.5 * (form + form.T)


@dataclass
class OperatorSet:
    """Bilinear forms of the scalar operators at one ``lambda``.

    ``forms`` holds ``stiffness`` (minus the Laplacian), ``A1``, ``A2``,
    ``B``, ``Bstar`` (the metric adjoint of ``B``), ``Bstar_direct`` (the
    adjoint assembled from its own definition) and, after
    :func:`assemble_L`, ``L``.
    """

    lam: float
    grid: CrossSectionGrid
    forms: dict
    moments: dict
    grams: tuple
    backend_kind: str
    asymmetry: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    _a1_factor: tuple | None = field(default=None, repr=False)

    @property
    def weights(self) -> np.ndarray:
        return self.grid.weights

    def operator(self, name: str) -> GridOperator:
        return GridOperator(self.forms[name], self.weights)

    def a1_factor(self):
        """Cholesky factor of ``-A1`` (raises when ``A1`` is not negative definite)."""
        if self._a1_factor is None:
            try:
                self._a1_factor = sla.cho_factor(-self.forms["A1"], lower=True)
            except np.linalg.LinAlgError:
                w = self.weights
                scaled = self.forms["A1"] / np.sqrt(np.outer(w, w))
                top = sla.eigvalsh(scaled, subset_by_index=[scaled.shape[0] - 5, scaled.shape[0] - 1])
                raise OperatorError("A1 is not negative definite", spectrum=top) from None
        return self._a1_factor

    def a1_solve_form(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``F_A1 x = rhs`` (``rhs`` may have several columns)."""
        return -sla.cho_solve(self.a1_factor(), rhs)


def assemble_scalar_ops(eq: Equilibrium, profile, lam: float, backend, rule: VelocityQuadrature | None = None,
                        moments: dict | None = None) -> OperatorSet:
    """Assemble ``A1``, ``A2``, ``B`` and ``B*`` at ``lam >= 0``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    g = eq.grid
    w = g.weights
    stiff = _stiffness(g).toarray()
    mom = moments if moments is not None else local_moments(eq, profile, rule)
    g00, g11, g10 = backend.scalar_grams(lam)
    report = {}
    if hasattr(backend, "local_grams"):
        d00, d10 = backend.local_grams()
        a1 = -stiff - d00 + g00
        b = d10 - g10
    else:
        a1 = -stiff + np.diag(w * mom["mu_e"]) + g00
        b = -np.diag(w * mom["vphi_mu_e"]) - g10
    a2 = stiff + np.diag(w / g.major**2) + lam * lam * np.diag(w) - np.diag(w * mom["r_vphi_mu_p"]) + g11
    b_direct = np.diag(w * mom["r_mu_p"]) - g10.T
    forms = {
        "stiffness": stiff,
        "A1": _symmetrize(a1, "A1", report),
        "A2": _symmetrize(a2, "A2", report),
        "B": b,
        "Bstar": b.T.copy(),
        "Bstar_direct": b_direct,
    }
    scale = max(float(np.abs(b).max()), float(np.abs(a2).max()) * 1e-12, 1e-300)
    report["Bstar_direct_gap"] = float(np.abs(b_direct - b.T).max()) / scale
    diag = backend.diagnostics() if hasattr(backend, "diagnostics") else {}
    return OperatorSet(float(lam), g, forms, mom, (g00, g11, g10), backend.kind, report, diag)


def assemble_L(opset: OperatorSet) -> np.ndarray:
    """Form of ``L = A2 - B A1^-1 B*`` via a Cholesky factorization of ``-A1``."""
    fb = opset.forms["B"]
    correction = fb @ opset.a1_solve_form(fb.T)
    lform = _symmetrize(opset.forms["A2"] - correction, "L", opset.asymmetry)
    opset.forms["L"] = lform
    opset.forms["L_correction"] = -_symmetrize(correction, "L_correction", opset.asymmetry)
    return lform


def quadratic_form_A2(h, opset: OperatorSet) -> dict:
    """Term-by-term value of ``<A2 h, h>``.

    ``gradient`` is ``||grad h||^2``, ``curvature`` is ``||h / R||^2``,
    ``momentum`` is ``-sum int int R vhat_phi mu_p h^2`` and ``projection``
    is ``sum ||Q(vhat_phi h)||_H^2``; ``growth`` is ``lambda^2 ||h||^2``.
    """
    h = np.asarray(h, dtype=float)
    g = opset.grid
    w = g.weights
    parts = {
        "gradient": float(h @ opset.forms["stiffness"] @ h),
        "curvature": float(np.sum(w * h * h / g.major**2)),
        "momentum": float(-np.sum(w * h * h * opset.moments["r_vphi_mu_p"])),
        "projection": float(h @ opset.grams[1] @ h),
        "growth": float(opset.lam**2 * np.sum(w * h * h)),
    }
    parts["total"] = float(h @ opset.forms["A2"] @ h)
    parts["sum_of_terms"] = sum(parts[k] for k in ("gradient", "curvature", "momentum", "projection", "growth"))
    return parts


# ---------------------------------------------------------------- divergence-free vector basis


@dataclass
class DivFreeBasis:
    """Orthonormal divergence-free poloidal fields from a stream function.

    A stream function ``psi`` with zero normal derivative at the wall gives
    ``A_r = -d_theta psi / (r R)`` and ``A_theta = d_r psi / R``, whose
    discrete divergence vanishes identically and whose angular component
    has a zero ghost flux at the wall.  Candidates come from the weighted
    problem ``-div(grad psi / R^2) = s psi / R^2``, for which the curl
    energy equals ``s`` times the field energy; they are then
    re-orthonormalized in the grid metric.

    ``vectors`` has shape ``(2N, n)`` with ``A_r`` stacked over
    ``A_theta``; ``sigma`` holds the Rayleigh quotients of the curl energy.
    """

    grid: CrossSectionGrid
    vectors: np.ndarray
    sigma: np.ndarray
    streams: np.ndarray

    @classmethod
    def build(cls, grid: CrossSectionGrid, n: int, oversample: int = 2):
        rr, _ = grid.mesh()
        big_r = grid.major
        w = grid.weights
        stiff = _stiffness(grid, coeff=lambda r, t: 1.0 / (grid.a + r * np.cos(t)) ** 2, wall="neumann")
        mass = w / big_r**2
        m = min(oversample * n + 1, grid.size - 1)
        if grid.size <= 2500:
            s, y = sla.eigh(stiff.toarray(), np.diag(mass), subset_by_index=[0, m])
        else:
            from scipy.sparse.linalg import eigsh

            s, y = eigsh(stiff.tocsc(), k=m + 1, M=sp.diags(mass).tocsc(), sigma=-1e-3)
            order = np.argsort(s)
            s, y = s[order], y[:, order]
        keep = s > 1e-9 * max(s[-1], 1.0)
        s, y = s[keep], y[:, keep]
        gmap = _stream_map(grid)
        raw = gmap @ y
        wv = np.concatenate([w, w])
        gram = raw.T @ (wv[:, None] * raw)
        curl = np.diag(s * s * np.einsum("ij,i,ij->j", y, mass, y))
        sigma, c = sla.eigh(curl, gram)
        sigma, c = sigma[:n], c[:, :n]
        return cls(grid, raw @ c, sigma, y @ c)

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    def divergence(self) -> np.ndarray:
        """Nodal discrete divergence of every basis vector, shape ``(N, n)``."""
        return discrete_divergence(self.grid, self.vectors)

    def orthonormality_error(self) -> float:
        w = self.grid.weights
        wv = np.concatenate([w, w])
        gram = self.vectors.T @ (wv[:, None] * self.vectors)
        return float(np.abs(gram - np.eye(self.size)).max())


def _stream_map(grid: CrossSectionGrid):
    rr, _ = grid.mesh()
    big_r = grid.major
    d_r = radial_derivative(grid, parity=1, wall="neumann")
    d_t = angular_derivative(grid)
    return sp.vstack([sp.diags(-1.0 / (rr * big_r)) @ d_t, sp.diags(1.0 / big_r) @ d_r]).tocsr()


def discrete_divergence(grid: CrossSectionGrid, fields: np.ndarray) -> np.ndarray:
    """``(d_r(r R A_r) + d_theta(R A_theta)) / (r R)`` for stacked ``(A_r, A_theta)`` columns."""
    rr, _ = grid.mesh()
    big_r = grid.major
    n = grid.size
    f = np.asarray(fields, dtype=float)
    squeeze = f.ndim == 1
    f = f.reshape(2 * n, -1)
    d_r = radial_derivative(grid, parity=1, wall="neumann")
    d_t = angular_derivative(grid)
    out = (d_r @ ((rr * big_r)[:, None] * f[:n]) + d_t @ (big_r[:, None] * f[n:])) / (rr * big_r)[:, None]
    return out[:, 0] if squeeze else out


def vector_curl(grid: CrossSectionGrid, fields: np.ndarray) -> np.ndarray:
    """Toroidal component ``(d_r(r A_theta) - d_theta A_r) / r`` of the curl."""
    rr, _ = grid.mesh()
    n = grid.size
    f = np.asarray(fields, dtype=float)
    d_r = radial_derivative(grid, parity=1, wall="neumann")
    d_t = angular_derivative(grid)
    return (d_r @ (rr * f[n:]) - d_t @ f[:n]) / rr


# ---------------------------------------------------------------- vector blocks and reduced matrix


@dataclass
class VectorBlocks:
    """Truncated composite blocks on the first ``n`` basis vectors.

    ``U`` is the ``n x n`` form of the vector composite, ``V`` the
    ``n x N`` coupling form, ``T1`` and ``T2`` the basis rows of the mixed
    operators (used to rebuild the scalar potential of a mode) and ``S``
    the vector operator on the basis.
    """

    lam: float
    basis: DivFreeBasis
    U: np.ndarray
    V: np.ndarray
    T1: np.ndarray
    T2: np.ndarray
    S: np.ndarray
    asymmetry: float
    definite: bool


def assemble_vector_blocks(opset: OperatorSet, backend, basis: DivFreeBasis, n: int | None = None) -> VectorBlocks:
    lam = opset.lam
    if lam <= 0:
        raise ValueError("vector blocks are defined for lambda > 0")
    n = basis.size if n is None else n
    if n > basis.size:
        raise ValueError(f"basis has only {basis.size} vectors")
    phi = basis.vectors[:, :n]
    sigma = basis.sigma[:n]
    terms = backend.vector_terms(lam, phi)
    s_form = -np.diag(sigma + lam * lam) - terms["gram"]
    t1 = terms["t1"]
    solved_t1 = opset.a1_solve_form(t1.T)
    solved_b = opset.a1_solve_form(opset.forms["B"].T)
    u = s_form - t1 @ solved_t1
    scale = max(float(np.abs(u).max()), 1e-300)
    asym = float(np.abs(u - u.T).max()) / scale
    u = 0.5 * (u + u.T)
    v = terms["t2"] - t1 @ solved_b
    definite = bool(np.linalg.eigvalsh(u).max() < 0)
    if not definite:
        logger.info("vector block is not negative definite at lambda = %.4g", lam)
    return VectorBlocks(lam, basis, u, v, t1, terms["t2"], s_form, asym, definite)


def reduced_matrix(opset: OperatorSet, blocks: VectorBlocks):
    """Metric-scaled symmetric reduced matrix and its scaling vector.

    Returns ``(M, scale)`` where ``M = D F D`` for the block form
    ``F = [[L, V^T], [V, U]]`` and ``D = diag(w^-1/2, 1)``; eigenvalues of
    ``M`` are those of the operator matrix in the grid metric.
    """
    lform = opset.forms.get("L")
    if lform is None:
        lform = assemble_L(opset)
    w = opset.weights
    d = np.concatenate([1.0 / np.sqrt(w), np.ones(blocks.U.shape[0])])
    big = np.block([[lform, blocks.V.T], [blocks.V, blocks.U]])
    big = 0.5 * (big + big.T)
    return d[:, None] * big * d[None, :], d


# ---------------------------------------------------------------- minimizer identity


def minimizer_identity_check(a_phi, a_tilde, opset: OperatorSet, backend) -> dict:
    """Compare the minimum of the kinetic energy functional with its closed form.

    The candidate minimizer is built from ``phi* = -A1^-1 B* A_phi`` and
    the projections of ``vhat . A`` at the trajectory seeds; its
    functional value (the weighted square of the distributions plus the
    field energy of the Poisson potential they generate) is compared with
    ``-<B A1^-1 B* A_phi, A_phi> + sum ||P(vhat . A)||_H^2``.
    """
    if opset.lam != 0:
        raise ValueError("the identity is stated at lambda = 0")
    if not isinstance(backend, TrajectoryBackend):
        raise ValueError("the identity check samples distributions at trajectory seeds")
    g = opset.grid
    nx = g.size
    w = g.weights
    a_phi = np.asarray(a_phi, dtype=float)
    a_tilde = np.zeros(2 * nx) if a_tilde is None else np.asarray(a_tilde, dtype=float)
    fb = opset.forms["B"]
    phi_star = -opset.a1_solve_form(fb.T @ a_phi)
    rhs_scalar = -float(a_phi @ fb @ opset.a1_solve_form(fb.T @ a_phi))
    rhs_proj = 0.0
    functional = 0.0
    density = w * opset.moments["mu_e"] * phi_star + w * opset.moments["r_mu_p"] * a_phi
    for sp_ in backend.species.values():
        rows = sp_.rows(0.0)
        loc = sp_.local
        c = sp_.weights
        proj_a = rows[:, 1, :nx] @ a_phi + rows[:, 2, :] @ a_tilde
        fluct = loc[:, 0, :nx] @ phi_star - rows[:, 0, :nx] @ phi_star
        rhs_proj += float(np.dot(c, proj_a**2))
        functional += float(np.dot(c, (fluct + proj_a) ** 2))
        # int mu_e g dv tested against nodal hat functions, mu_e = -|mu_e|
        density -= loc[:, 0, :nx].T @ (c * (proj_a - rows[:, 0, :nx] @ phi_star))
    stiff = opset.forms["stiffness"]
    potential = sla.solve(stiff, density, assume_a="pos")
    field_energy = float(potential @ stiff @ potential)
    lhs = functional + field_energy
    rhs = rhs_scalar + rhs_proj
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {
        "lhs": lhs,
        "rhs": rhs,
        "relative_gap": abs(lhs - rhs) / scale,
        "rhs_scalar_part": rhs_scalar,
        "rhs_projection_part": rhs_proj,
        "field_energy": field_energy,
        "phi_star_gap": float(np.sqrt(np.sum(w * (potential - phi_star) ** 2)) /
                              max(np.sqrt(np.sum(w * phi_star**2)), np.sqrt(np.sum(w * potential**2)), 1e-300)),
    }


# ---------------------------------------------------------------- dump


def dump_operators(opset: OperatorSet, stem, config_hash: str = "", names=("A1", "A2", "B", "L")):
    """Write each form as a row-major float64 file with a JSON sidecar.

    Binary layout: ``int64 rows, int64 cols`` followed by the metric
    weights (``rows`` doubles) and the matrix entries.
    """
    meta = {"lambda": opset.lam, "backend": opset.backend_kind, "asymmetry": opset.asymmetry,
            "config_hash": config_hash, "grid": {"a": opset.grid.a, "n_r": opset.grid.n_r,
                                                 "n_theta": opset.grid.n_theta}, "files": {}}
    for name in names:
        if name not in opset.forms:
            continue
        f = np.ascontiguousarray(opset.forms[name], dtype=np.float64)
        path = f"{stem}_{name}.bin"
        with open(path, "wb") as fh:
            np.array(f.shape, dtype=np.int64).tofile(fh)
            opset.weights.astype(np.float64).tofile(fh)
            f.tofile(fh)
        meta["files"][name] = path
    with open(f"{stem}.json", "w") as fh:
        json.dump(meta, fh, indent=2, default=float)
    return meta
