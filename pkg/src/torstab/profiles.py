"""Equilibrium distribution profiles ``mu(e, p)`` per species.

A profile is a closed-form function of the particle energy ``e`` and the
toroidal angular momentum ``p`` together with its partial derivatives.  The
ion profile (species ``+1``) is ``ratio * base(e, p) * tilt(p)`` and the
electron profile (species ``-1``) is ``base(e, -p) * tilt(-p)``, so profiles
with ``ratio = 1`` satisfy ``mu_plus(e, p) = mu_minus(e, -p)``.

Built-in families (``c`` is an amplitude, ``K`` the momentum scaling):

``vacuum``       ``0``
``stable_even``  ``c exp(-e - (K p)^2)``
``instability``  ``c (1 + beta (K p)^2) exp(-e)``
``small_mu_p``   ``c exp(-e) (1 + eps tanh(K p))``

Every family accepts an optional ``tilt`` which multiplies the base by
``1 + tilt tanh(K p)``; a nonzero tilt makes the equilibrium current
nonzero and so produces a genuine poloidal magnetic field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["MuProfile", "FAMILIES", "evaluate", "validate_hypotheses", "scale_in_p", "make_profile"]

FAMILIES = {
    "vacuum": {},
    "stable_even": {"c": 0.05},
    "instability": {"c": 1.0, "beta": 1.0},
    "small_mu_p": {"c": 0.05, "eps": 0.05},
}


def _sech2(x):
    return 1.0 / np.cosh(np.clip(x, -350, 350)) ** 2


@dataclass(frozen=True)
class MuProfile:
    """Two-species equilibrium profile with analytic derivatives."""

    family: str
    params: tuple = ()
    gamma: float = 4.0
    c_mu: float | None = None
    k: float = 1.0
    tilt: float = 0.0
    ratio: float = 1.0
    _p: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown profile family {self.family!r}; choose from {sorted(FAMILIES)}")
        merged = dict(FAMILIES[self.family])
        unknown = set(dict(self.params)) - set(merged)
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)} for family {self.family!r}")
        merged.update(dict(self.params))
        object.__setattr__(self, "_p", merged)
        if self.gamma <= 3.0:
            raise ValueError("decay exponent gamma must exceed 3")
        if self.k < 0:
            raise ValueError("momentum scaling K must be nonnegative")
        if abs(self.tilt) >= 1.0:
            raise ValueError("|tilt| must be below 1 to keep the profile nonnegative")
        if self.ratio < 0:
            raise ValueError("species ratio must be nonnegative")

    @property
    def is_vacuum(self) -> bool:
        return self.family == "vacuum" or self._p.get("c", 1.0) == 0.0

    def describe(self) -> dict:
        return {
            "family": self.family,
            "params": dict(self._p),
            "gamma": self.gamma,
            "c_mu": self.c_mu,
            "K": self.k,
            "tilt": self.tilt,
            "ratio": self.ratio,
        }

    # base family and its derivatives in the scaled momentum q = K p
    def _base(self, e, q):
        pr = self._p
        f = self.family
        if f == "vacuum":
            z = np.zeros(np.broadcast(e, q).shape)
            return z, z, z
        if f == "stable_even":
            m = pr["c"] * np.exp(-e - q * q)
            return m, -m, -2.0 * q * m
        if f == "instability":
            ex = pr["c"] * np.exp(-e)
            m = (1.0 + pr["beta"] * q * q) * ex
            return m, -m, 2.0 * pr["beta"] * q * ex
        if f == "small_mu_p":
            ex = pr["c"] * np.exp(-e)
            m = ex * (1.0 + pr["eps"] * np.tanh(q))
            return m, -m, ex * pr["eps"] * _sech2(q)
        raise AssertionError(f)

    def _single(self, e, p):
        q = self.k * np.asarray(p, dtype=float)
        m, me, mq = self._base(np.asarray(e, dtype=float), q)
        if self.tilt:
            t = 1.0 + self.tilt * np.tanh(q)
            dt = self.tilt * _sech2(q)
            m, me, mq = m * t, me * t, mq * t + m * dt
        return m, me, self.k * mq

    def values(self, species: int, e, p):
        """Return ``(mu, mu_e, mu_p)`` for species ``+1`` or ``-1``.

        Array arguments broadcast.  No domain check is applied, since the
        energy invariant ``<v> +- phi`` may dip below one in an electric
        potential.
        """
        if species == 1:
            m, me, mp = self._single(e, p)
            return self.ratio * m, self.ratio * me, self.ratio * mp
        if species == -1:
            m, me, mp = self._single(e, -np.asarray(p, dtype=float))
            return m, me, -mp
        raise ValueError("species must be +1 or -1")

    def mu(self, species, e, p):
        return self.values(species, e, p)[0]

    def mu_e(self, species, e, p):
        return self.values(species, e, p)[1]

    def mu_p(self, species, e, p):
        return self.values(species, e, p)[2]

    def reachable_lattice(self, a: float, psi_bound: float = 0.0, e_max: float = 40.0, n_e: int = 80, n_p: int = 81):
        """Deterministic ``(e, p)`` samples of the kinematically reachable set."""
        e = 1.0 + np.expm1(np.linspace(0.0, math.log(e_max), n_e))
        e = np.clip(e, 1.0, None)
        s = np.linspace(-1.0, 1.0, n_p)
        pmax = (a + 1.0) * np.sqrt(e * e - 1.0) + psi_bound
        ee = np.repeat(e, n_p)
        pp = (pmax[:, None] * s[None, :]).ravel()
        return ee, pp

    def decay_constant(self, a: float, psi_bound: float = 0.0) -> float:
        """Sampled ``sup (|mu| + |mu_p| + |mu_e|)(1 + e^gamma)`` over both species."""
        e, p = self.reachable_lattice(a, psi_bound)
        best = 0.0
        for s in (1, -1):
            m, me, mp = self.values(s, e, p)
            best = max(best, float(np.max((np.abs(m) + np.abs(me) + np.abs(mp)) * (1 + e**self.gamma))))
        return best

    def envelope(self, e, a: float = 3.0):
        """Sampled bound on ``|mu| + |mu_p| + |mu_e|`` summed over species at fixed energy."""
        e = np.atleast_1d(np.asarray(e, dtype=float))
        s = np.linspace(-1.0, 1.0, 41)
        out = np.zeros_like(e)
        for idx, ev in enumerate(e):
            p = (a + 1.0) * math.sqrt(max(ev * ev - 1.0, 0.0)) * s
            tot = 0.0
            for sp in (1, -1):
                m, me, mp = self.values(sp, ev, p)
                tot += float(np.max(np.abs(m) + np.abs(me) + np.abs(mp)))
            out[idx] = tot
        return out

    def tail_bound(self, v_max: float, a: float = 3.0) -> float:
        """Estimate of the velocity integral of the envelope beyond ``v_max``."""
        if self.is_vacuum:
            return 0.0

        # the envelope is a sampled maximum and not smooth, so a fixed
        # composite Gauss rule is used instead of an adaptive one
        x, wq = np.polynomial.legendre.leggauss(16)
        edges = np.linspace(v_max, v_max + 80.0, 17)
        mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
        half = 0.5 * (edges[1:] - edges[:-1])[:, None]
        s = (mid + half * x[None, :]).ravel()
        wts = (half * wq[None, :]).ravel()
        env = self.envelope(np.sqrt(1.0 + s * s), a)
        return float(np.sum(wts * 4 * math.pi * s * s * env))


def make_profile(family: str, gamma: float = 4.0, c_mu=None, k: float = 1.0, tilt: float = 0.0,
                 ratio: float = 1.0, **params) -> MuProfile:
    return MuProfile(family, tuple(sorted(params.items())), gamma, c_mu, k, tilt, ratio)


def evaluate(profile: MuProfile, species: int, e, p, which: str = "value"):
    """Evaluate ``mu``, ``mu_e`` (``which='de'``) or ``mu_p`` (``which='dp'``)."""
    e_arr = np.asarray(e, dtype=float)
    if np.any(e_arr < 1.0):
        raise ValueError("energy argument must satisfy e >= 1")
    idx = {"value": 0, "de": 1, "dp": 2}.get(which)
    if idx is None:
        raise ValueError(f"which must be 'value', 'de' or 'dp', got {which!r}")
    return profile.values(species, e_arr, p)[idx]


def scale_in_p(profile: MuProfile, k: float) -> MuProfile:
    """Return the profile ``mu(e, K p)``; derivatives follow the chain rule."""
    if not k > 0:
        raise ValueError("scaling factor K must be positive")
    return replace(profile, k=profile.k * k)


def validate_hypotheses(profile: MuProfile, a: float = 2.0, psi_bound: float = 0.0,
                        eps_small: float = 0.1, nu=None) -> dict:
    """Sampled checks of the structural hypotheses on a profile.

    Each entry holds a boolean ``ok`` and the worst sampled margin:

    ``nonnegative``              ``mu >= 0``
    ``energy_decreasing``        ``mu_e < 0`` wherever ``mu > 0``
    ``decay``                    power-law envelope with the computed ``C_mu``
    ``reflection_symmetric``     ``mu_plus(e, p) = mu_minus(e, -p)``
    ``momentum_monotone``        ``p mu_p <= 0`` for both species
    ``small_momentum_derivative`` ``|mu_p| (1 + e^gamma) <= eps_small``
    ``momentum_growth``          ``p mu_p >= c0 p^2 nu(e)`` for electrons, ``c0 > 0``
    ``energy_momentum_positive`` ``p mu_p + e mu_e > 0`` for electrons
    """
    nu = nu or (lambda e: np.exp(-e))
    e, p = profile.reachable_lattice(a, psi_bound)
    rep = {}
    vals = {s: profile.values(s, e, p) for s in (1, -1)}
    mins = min(float(vals[s][0].min()) for s in (1, -1))
    rep["nonnegative"] = {"ok": mins >= 0.0, "margin": mins}
    worst = -np.inf
    for s in (1, -1):
        m, me, _ = vals[s]
        pos = m > 1e-300
        if np.any(pos):
            worst = max(worst, float(me[pos].max()))
    rep["energy_decreasing"] = {"ok": bool(worst < 0 or not np.isfinite(worst)), "margin": float(worst) if np.isfinite(worst) else 0.0}
    cmu = profile.decay_constant(a, psi_bound)
    declared = profile.c_mu if profile.c_mu is not None else cmu
    rep["decay"] = {"ok": bool(cmu <= declared * (1 + 1e-12) and np.isfinite(cmu)), "margin": float(declared - cmu), "c_mu": cmu}
    m_minus_flip = profile.values(-1, e, -p)[0]
    asym = float(np.max(np.abs(vals[1][0] - m_minus_flip)))
    rep["reflection_symmetric"] = {"ok": asym <= 1e-12 * max(1.0, float(np.abs(vals[1][0]).max())), "margin": -asym}
    pm = max(float(np.max(p * vals[s][2])) for s in (1, -1))
    rep["momentum_monotone"] = {"ok": pm <= 1e-15, "margin": -pm}
    eps_needed = max(float(np.max(np.abs(vals[s][2]) * (1 + e**profile.gamma))) for s in (1, -1))
    rep["small_momentum_derivative"] = {"ok": eps_needed <= eps_small, "margin": eps_small - eps_needed, "eps": eps_needed}
    nz = np.abs(p) > 1e-8
    _, me_m, mp_m = vals[-1]
    if np.any(nz):
        c0 = float(np.min(p[nz] * mp_m[nz] / (p[nz] ** 2 * nu(e[nz]))))
    else:
        c0 = 0.0
    rep["momentum_growth"] = {"ok": c0 > 0.0, "margin": c0, "c0": c0}
    em = float(np.min(p * mp_m + e * me_m))
    rep["energy_momentum_positive"] = {"ok": em > 0.0, "margin": em}
    return rep
