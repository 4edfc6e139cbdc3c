"""Reflected particle characteristics in the equilibrium fields.

Trajectories are integrated in the meridional half plane with state
``(y1, y2, v_R, v_phi, v_Z)`` where ``y1 = R - a`` and ``y2 = Z``.  For a
particle of charge sign ``s`` with ``vhat = v / <v>`` the equations are

    y1' = vhat_R,   y2' = vhat_Z
    v_R'   = s (E_R + vhat_phi B_Z) + v_phi vhat_phi / R
    v_phi' = s (vhat_Z B_R - vhat_R B_Z) - v_R vhat_phi / R
    v_Z'   = s (E_Z - vhat_phi B_R)

with ``E = -grad phi``, ``B_R = -d_Z psi / R`` and ``B_Z = d_R psi / R`` for
the flux ``psi = R A_phi``.  Both potentials are cubic splines, so the
energy ``<v> + s phi`` and momentum ``R v_phi + s psi`` are exact invariants
of the continuous flow.  At the wall ``r = 1`` the normal velocity is
reversed after the crossing time has been located by bisection.

Backward-in-time trajectories use the reversal symmetry: the path through
``(x, v)`` for ``s <= 0`` is the forward path through
``(x, (-v_r, -v_theta, v_phi))`` with the poloidal velocity flipped back.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from ._spline import spline_eval

logger = logging.getLogger(__name__)

# prefer OpenMP to an outdated system TBB for the parallel kernels
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

__all__ = [
    "PhaseState",
    "TrajectoryCache",
    "SeedCache",
    "integrate_reflecting",
    "q_lambda_average",
    "ergodic_average",
    "bounce_statistics",
    "build_seed_cache",
    "transport_field",
    "to_meridional",
    "to_toroidal",
]

WALL_TOL = 1e-12
GRAZING_TOL = 1e-10


# ---------------------------------------------------------------- conversions


def to_meridional(state):
    """``(r, theta, v_r, v_theta, v_phi)`` rows to ``(y1, y2, v_R, v_phi, v_Z)``."""
    s = np.atleast_2d(np.asarray(state, dtype=float))
    r, th, vr, vt, vp = s.T
    c, sn = np.cos(th), np.sin(th)
    return np.stack([r * c, r * sn, vr * c - vt * sn, vp, vr * sn + vt * c], axis=1)


def to_toroidal(state):
    """Inverse of :func:`to_meridional`."""
    s = np.atleast_2d(np.asarray(state, dtype=float))
    y1, y2, vR, vp, vZ = s.T
    r = np.hypot(y1, y2)
    th = np.mod(np.arctan2(y2, y1), 2 * math.pi)
    c, sn = np.cos(th), np.sin(th)
    return np.stack([r, th, vR * c + vZ * sn, -vR * sn + vZ * c, vp], axis=1)


# ---------------------------------------------------------------- numba core


@numba.njit(cache=True)
def _deriv(y, sgn, a, field_free, cphi, ophi, hphi, cpsi, opsi, hpsi, out):
    y1 = y[0]
    y2 = y[1]
    vR = y[2]
    vF = y[3]
    vZ = y[4]
    big_r = a + y1
    gam = math.sqrt(1.0 + vR * vR + vF * vF + vZ * vZ)
    uR = vR / gam
    uF = vF / gam
    uZ = vZ / gam
    out[0] = uR
    out[1] = uZ
    if field_free:
        out[2] = vF * uF / big_r
        out[3] = -vR * uF / big_r
        out[4] = 0.0
        return
    _, p1, p2 = spline_eval(cphi, ophi, hphi, y1, y2)
    _, q1, q2 = spline_eval(cpsi, opsi, hpsi, y1, y2)
    e_r = -p1
    e_z = -p2
    b_r = -q2 / big_r
    b_z = q1 / big_r
    out[2] = sgn * (e_r + uF * b_z) + vF * uF / big_r
    out[3] = sgn * (uZ * b_r - uR * b_z) - vR * uF / big_r
    out[4] = sgn * (e_z - uF * b_r)


@numba.njit(cache=True)
def _rk4(y, dt, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k1, k2, k3, k4, tmp, out):
    _deriv(y, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k1)
    for m in range(5):
        tmp[m] = y[m] + 0.5 * dt * k1[m]
    _deriv(tmp, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k2)
    for m in range(5):
        tmp[m] = y[m] + 0.5 * dt * k2[m]
    _deriv(tmp, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k3)
    for m in range(5):
        tmp[m] = y[m] + dt * k3[m]
    _deriv(tmp, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k4)
    for m in range(5):
        out[m] = y[m] + dt * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m]) / 6.0


@numba.njit(cache=True)
def _reflect(y):
    """Specular reflection at the wall; returns False for grazing contact."""
    r = math.sqrt(y[0] * y[0] + y[1] * y[1])
    n1 = y[0] / r
    n2 = y[1] / r
    gam = math.sqrt(1.0 + y[2] * y[2] + y[3] * y[3] + y[4] * y[4])
    vn = y[2] * n1 + y[4] * n2
    if vn / gam < GRAZING_TOL:
        return False
    y[2] -= 2.0 * vn * n1
    y[4] -= 2.0 * vn * n2
    return True


@numba.njit(cache=True)
def _advance(y, dt, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, work, max_bounce):
    """Advance ``y`` in place by ``dt``; returns (bounces, bounce offset, degenerate)."""
    k1 = work[0]
    k2 = work[1]
    k3 = work[2]
    k4 = work[3]
    tmp = work[4]
    trial = work[5]
    remaining = dt
    bounces = 0
    first = -1.0
    while True:
        _rk4(y, remaining, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k1, k2, k3, k4, tmp, trial)
        r2 = trial[0] * trial[0] + trial[1] * trial[1]
        if r2 <= 1.0:
            for m in range(5):
                y[m] = trial[m]
            return bounces, first, False
        lo = 0.0
        hi = remaining
        converged = False
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            _rk4(y, mid, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k1, k2, k3, k4, tmp, trial)
            rm = math.sqrt(trial[0] * trial[0] + trial[1] * trial[1])
            if rm > 1.0:
                hi = mid
            else:
                lo = mid
                if 1.0 - rm < WALL_TOL:
                    converged = True
                    break
            if hi - lo < 1e-300:
                break
        _rk4(y, lo, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, k1, k2, k3, k4, tmp, trial)
        for m in range(5):
            y[m] = trial[m]
        if not converged or not _reflect(y):
            return bounces, first, True
        if bounces == 0:
            first = dt - remaining + lo
        bounces += 1
        remaining -= lo
        if bounces > max_bounce:
            return bounces, first, True
        if remaining <= 0.0:
            return bounces, first, False


@numba.njit(cache=True)
def _start(y):
    """Reflect a seed sitting on the wall with outward velocity."""
    r = math.sqrt(y[0] * y[0] + y[1] * y[1])
    if r >= 1.0 - WALL_TOL:
        vn = y[2] * y[0] + y[4] * y[1]
        if vn > 0.0:
            return _reflect(y)
    return True


@numba.njit(cache=True)
def _trajectory(y0, n_steps, stride, dt, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, max_bounce):
    n_out = n_steps // stride + 1
    out = np.empty((n_out, 5))
    btimes = np.empty(max_bounce + 16)
    y = y0.copy()
    work = np.empty((6, 5))
    for m in range(5):
        out[0, m] = y[m]
    nb = 0
    if not _start(y):
        return out[:1], btimes[:0], nb, True
    for k in range(1, n_steps + 1):
        b, first, bad = _advance(y, dt, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, work, 4)
        if b > 0 and nb < btimes.size:
            btimes[nb] = (k - 1) * dt + first
        nb += b
        if bad or nb > max_bounce:
            q = (k - 1) // stride + 1
            return out[:q], btimes[: min(nb, btimes.size)], nb, True
        if k % stride == 0:
            q = k // stride
            for m in range(5):
                out[q, m] = y[m]
    return out, btimes[: min(nb, btimes.size)], nb, False


@numba.njit(cache=True, inline="always")
def _interp(r, th, nr, nt, dr, dth, parity, idx, wgt):
    """Bilinear weights matching :func:`geometry.interpolation_matrix`."""
    two_pi = 2.0 * math.pi
    tpos = (th % two_pi) / dth
    fj = math.floor(tpos)
    ft = tpos - fj
    j0 = int(fj) % nt
    j1 = (j0 + 1) % nt
    half = nt // 2
    s = r / dr - 0.5
    i0 = int(math.floor(s))
    fr = s - i0
    if i0 < 0:
        idx[0] = (j0 + half) % nt
        wgt[0] = parity * (1.0 - fr) * (1.0 - ft)
        idx[1] = j0
        wgt[1] = fr * (1.0 - ft)
        idx[2] = (j1 + half) % nt
        wgt[2] = parity * (1.0 - fr) * ft
        idx[3] = j1
        wgt[3] = fr * ft
    elif i0 < nr - 1:
        idx[0] = i0 * nt + j0
        wgt[0] = (1.0 - fr) * (1.0 - ft)
        idx[1] = (i0 + 1) * nt + j0
        wgt[1] = fr * (1.0 - ft)
        idx[2] = i0 * nt + j1
        wgt[2] = (1.0 - fr) * ft
        idx[3] = (i0 + 1) * nt + j1
        wgt[3] = fr * ft
    else:
        lam = (r - (nr - 0.5) * dr) / (0.5 * dr)
        lam = min(max(lam, 0.0), 1.0)
        idx[0] = (nr - 1) * nt + j0
        wgt[0] = (1.0 - lam) * (1.0 - ft)
        idx[1] = (nr - 1) * nt + j1
        wgt[1] = (1.0 - lam) * ft
        idx[2] = idx[0]
        wgt[2] = 0.0
        idx[3] = idx[1]
        wgt[3] = 0.0


@numba.njit(cache=True, inline="always")
def _polar(y):
    """Return r, theta, vhat_r, vhat_theta, vhat_phi of a meridional state."""
    r = math.sqrt(y[0] * y[0] + y[1] * y[1])
    th = math.atan2(y[1], y[0])
    c = math.cos(th)
    s = math.sin(th)
    gam = math.sqrt(1.0 + y[2] * y[2] + y[3] * y[3] + y[4] * y[4])
    vr = (y[2] * c + y[4] * s) / gam
    vt = (-y[2] * s + y[4] * c) / gam
    return min(r, 1.0), th, vr, vt, y[3] / gam


@numba.njit(cache=True)
def _accumulate(rows, y, wt, vsign, nr, nt, dr, dth, with_vec, idx, wgt):
    nx = nr * nt
    r, th, vr, vt, vf = _polar(y)
    vr *= vsign
    vt *= vsign
    _interp(r, th, nr, nt, dr, dth, 1.0, idx, wgt)
    for m in range(4):
        rows[0, idx[m]] += wt * wgt[m]
        rows[1, idx[m]] += wt * vf * wgt[m]
    if with_vec:
        _interp(r, th, nr, nt, dr, dth, -1.0, idx, wgt)
        for m in range(4):
            rows[2, idx[m]] += wt * vr * wgt[m]
            rows[2, nx + idx[m]] += wt * vt * wgt[m]


@numba.njit(cache=True, parallel=True)
def _seed_batch(seeds, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, dt, n_steps, stride, n_keep,
                nr, nt, dr, dth, with_vec, max_bounce):
    """Backward trajectories from many seeds.

    ``seeds`` are meridional states already reversed in their poloidal
    velocity.  Returns cached samples (with velocities flipped back), the
    time-averaged rows over the full horizon, the relative change of those
    rows between the half and full horizon, bounce counts and degenerate
    flags.
    """
    n = seeds.shape[0]
    nx = nr * nt
    width = 2 * nx if with_vec else nx
    nrow = 3 if with_vec else 2
    samples = np.zeros((n, n_keep, 5), dtype=np.float32)
    erg = np.zeros((n, nrow, width))
    drift = np.zeros(n)
    bounces = np.zeros(n, dtype=np.int64)
    bad = np.zeros(n, dtype=np.bool_)
    half_steps = n_steps // 2
    for z in numba.prange(n):
        y = seeds[z].copy()
        work = np.empty((6, 5))
        idx = np.empty(4, dtype=np.int64)
        wgt = np.empty(4)
        rows = np.zeros((nrow, width))
        half = np.zeros((nrow, width))
        if not _start(y):
            bad[z] = True
            continue
        samples[z, 0, 0] = y[0]
        samples[z, 0, 1] = y[1]
        samples[z, 0, 2] = -y[2]
        samples[z, 0, 3] = y[3]
        samples[z, 0, 4] = -y[4]
        _accumulate(rows, y, 0.5, -1.0, nr, nt, dr, dth, with_vec, idx, wgt)
        nb = 0
        steps_done = 0
        for k in range(1, n_steps + 1):
            b, _, flag = _advance(y, dt, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, work, 4)
            nb += b
            if flag or nb > max_bounce:
                bad[z] = True
                break
            steps_done = k
            wt = 0.5 if k == n_steps else 1.0
            _accumulate(rows, y, wt, -1.0, nr, nt, dr, dth, with_vec, idx, wgt)
            if k == half_steps:
                for p in range(nrow):
                    for q in range(width):
                        half[p, q] = rows[p, q] / (k - 0.5)
            if k % stride == 0 and k // stride < n_keep:
                q = k // stride
                samples[z, q, 0] = y[0]
                samples[z, q, 1] = y[1]
                samples[z, q, 2] = -y[2]
                samples[z, q, 3] = y[3]
                samples[z, q, 4] = -y[4]
        bounces[z] = nb
        if bad[z] or steps_done == 0:
            continue
        num = 0.0
        den = 0.0
        for q in range(nx):
            v = rows[0, q] / n_steps
            erg[z, 0, q] = v
            erg[z, 1, q] = rows[1, q] / n_steps
            num += (v - half[0, q]) ** 2
            den += v * v
        if with_vec:
            for q in range(width):
                erg[z, 2, q] = rows[2, q] / n_steps
        drift[z] = math.sqrt(num / den) if den > 0 else 0.0
    return samples, erg, drift, bounces, bad


@numba.njit(cache=True, parallel=True)
def _q_rows(samples, erg, lam, ds, nr, nt, dr, dth, with_vec):
    """Exponentially weighted rows from cached samples plus the ergodic tail."""
    n, m_keep, _ = samples.shape
    nx = nr * nt
    width = erg.shape[2]
    nrow = erg.shape[1]
    out = np.zeros((n, nrow, width))
    alpha = lam * ds
    if alpha > 0:
        c1 = -math.expm1(-alpha) / alpha
    else:
        c1 = 1.0
    w_head = 1.0 - c1
    w_tail = c1 - math.exp(-alpha)
    for z in numba.prange(n):
        idx = np.empty(4, dtype=np.int64)
        wgt = np.empty(4)
        y = np.empty(5)
        rows = np.zeros((nrow, width))
        decay = 1.0
        for k in range(m_keep - 1):
            # weight of sample k from the interval behind and ahead of it
            wk = decay * w_head
            if k > 0:
                wk += decay * math.exp(alpha) * w_tail
            for m in range(5):
                y[m] = samples[z, k, m]
            _accumulate(rows, y, wk, 1.0, nr, nt, dr, dth, with_vec, idx, wgt)
            decay *= math.exp(-alpha)
        k = m_keep - 1
        wk = decay * math.exp(alpha) * w_tail
        for m in range(5):
            y[m] = samples[z, k, m]
        _accumulate(rows, y, wk, 1.0, nr, nt, dr, dth, with_vec, idx, wgt)
        for p in range(nrow):
            for q in range(width):
                out[z, p, q] = rows[p, q] + decay * erg[z, p, q]
    return out


@numba.njit(cache=True)
def _local_rows(samples, nrow, width, nr, nt, dr, dth, with_vec):
    n = samples.shape[0]
    out = np.zeros((n, nrow, width))
    idx = np.empty(4, dtype=np.int64)
    wgt = np.empty(4)
    y = np.empty(5)
    for z in range(n):
        for m in range(5):
            y[m] = samples[z, 0, m]
        _accumulate(out[z], y, 1.0, 1.0, nr, nt, dr, dth, with_vec, idx, wgt)
    return out


@numba.njit(cache=True)
def _deriv_batch(states, sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi):
    out = np.empty_like(states)
    buf = np.empty(5)
    for k in range(states.shape[0]):
        _deriv(states[k], sgn, a, ff, cphi, ophi, hphi, cpsi, opsi, hpsi, buf)
        out[k] = buf
    return out


# ---------------------------------------------------------------- python API


@dataclass(frozen=True)
class PhaseState:
    """Phase point in toroidal components with its species sign."""

    r: float
    theta: float
    v_r: float
    v_theta: float
    v_phi: float
    species: int = 1

    def __post_init__(self):
        vals = (self.r, self.theta, self.v_r, self.v_theta, self.v_phi)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("phase state components must be finite")
        if not 0.0 <= self.r <= 1.0 + WALL_TOL:
            raise ValueError("phase state must lie in the closed torus")
        if self.species not in (1, -1):
            raise ValueError("species must be +1 or -1")

    def array(self):
        return np.array([self.r, self.theta, self.v_r, self.v_theta, self.v_phi])

    def reversed(self):
        """Time-reversed point ``(-v_r, -v_theta, v_phi)``."""
        return PhaseState(self.r, self.theta, -self.v_r, -self.v_theta, self.v_phi, self.species)

    def specular(self):
        """Wall-mirrored point ``(-v_r, v_theta, v_phi)``."""
        return PhaseState(self.r, self.theta, -self.v_r, self.v_theta, self.v_phi, self.species)


@dataclass
class TrajectoryCache:
    """Samples of one reflected characteristic.

    ``times`` are ``s_k`` (nonpositive for backward runs) and ``states``
    holds ``(r, theta, v_r, v_theta, v_phi)`` per sample.
    """

    seed: PhaseState
    times: np.ndarray
    states: np.ndarray
    bounce_times: np.ndarray
    bounces: int
    degenerate: bool

    def to_csv(self, path, config_hash: str = ""):
        hdr = "s,r,theta,v_r,v_theta,v_phi,bounce_flag"
        flags = np.zeros(self.times.size)
        if self.bounce_times.size:
            edges = np.searchsorted(np.abs(self.times), np.abs(self.bounce_times))
            flags[np.clip(edges, 0, flags.size - 1)] = 1
        data = np.column_stack([self.times, self.states, flags])
        comment = f"config_hash={config_hash}\n" if config_hash else ""
        np.savetxt(path, data, delimiter=",", header=comment + hdr, comments="# " if comment else "")


def _field_args(eq):
    sp_phi, sp_psi = eq.splines()
    ff = eq.is_field_free
    return (float(eq.grid.a), ff, sp_phi.coef, sp_phi.origin, sp_phi.h, sp_psi.coef, sp_psi.origin, sp_psi.h)


def transport_field(states_meridional, species: int, eq) -> np.ndarray:
    """Time derivative of meridional states under the equilibrium flow."""
    y = np.ascontiguousarray(np.atleast_2d(np.asarray(states_meridional, dtype=float)))
    a, ff, c1, o1, h1, c2, o2, h2 = _field_args(eq)
    return _deriv_batch(y, float(species), a, ff, c1, o1, h1, c2, o2, h2)


def integrate_reflecting(seed: PhaseState, eq, horizon: float, dt: float = 1e-3, sample_dt: float | None = None,
                         backward: bool = False, max_bounce: int = 100000) -> TrajectoryCache:
    """Integrate one characteristic over ``[0, horizon]`` (or ``[-horizon, 0]``)."""
    if horizon <= 0 or dt <= 0:
        raise ValueError("horizon and dt must be positive")
    stride = max(1, int(round((sample_dt or dt) / dt)))
    n_steps = int(math.ceil(horizon / dt))
    start = seed.reversed() if backward else seed
    y0 = to_meridional(start.array())[0]
    a, ff, c1, o1, h1, c2, o2, h2 = _field_args(eq)
    out, bt, nb, bad = _trajectory(y0, n_steps, stride, dt, float(seed.species), a, ff, c1, o1, h1, c2, o2, h2, max_bounce)
    states = to_toroidal(out)
    times = np.arange(states.shape[0]) * stride * dt
    if backward:
        states[:, 2:4] *= -1.0
        times = -times
        bt = -bt
    if bad:
        logger.debug("trajectory flagged degenerate after %d bounces", nb)
    return TrajectoryCache(seed, times, states, np.asarray(bt), int(nb), bool(bad))


def _as_values(g, cache: TrajectoryCache):
    vals = np.asarray(g(cache.states), dtype=float)
    if vals.shape != (cache.states.shape[0],):
        raise ValueError("phase function must return one value per sample")
    return vals


def q_lambda_average(g, lam: float, seed: PhaseState, eq, horizon: float | None = None, dt: float = 1e-3):
    """Exponentially weighted backward average ``int lam e^{lam s} g ds``.

    ``g`` maps an ``(M, 5)`` array of toroidal states to ``M`` values.  The
    default horizon is ``40 / lam``; a shorter horizon triggers a warning and
    the missing tail is closed with the running time average.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    want = 40.0 / lam
    horizon = want if horizon is None else horizon
    if horizon < want:
        logger.warning("horizon %.3g shorter than 40/lambda; tail weight %.2e closed by the time average",
                       horizon, math.exp(-lam * horizon))
    step = min(dt, 0.02 / lam)
    cache = integrate_reflecting(seed, eq, horizon, dt=step, backward=True)
    vals = _as_values(g, cache)
    t = np.abs(cache.times)
    total_t = t[-1]
    # piecewise-linear g against lam e^{-lam t}
    alpha = lam * np.diff(t)
    c1 = np.where(alpha > 0, -np.expm1(-alpha) / np.where(alpha > 0, alpha, 1.0), 1.0)
    decay = np.exp(-lam * t[:-1])
    value = float(np.sum(decay * ((1 - c1) * vals[:-1] + (c1 - np.exp(-alpha)) * vals[1:])))
    tail = math.exp(-lam * total_t)
    if tail > 0:
        mean = float(np.trapezoid(vals, t) / total_t) if total_t > 0 else float(vals[0])
        value += tail * mean
    return value


def ergodic_average(g, seed: PhaseState, eq, horizon: float = 2000.0, dt: float = 1e-2, tol: float = 0.01):
    """Time average of ``g`` over ``[0, horizon]`` with a half-horizon check.

    Returns ``(value, diagnostics)`` where diagnostics report the half- and
    full-horizon averages and whether they agree within ``tol``.
    """
    cache = integrate_reflecting(seed, eq, horizon, dt=dt)
    vals = _as_values(g, cache)
    t = cache.times
    full = float(np.trapezoid(vals, t) / t[-1])
    mid = vals.size // 2
    half = float(np.trapezoid(vals[: mid + 1], t[: mid + 1]) / t[mid]) if mid > 0 else full
    scale = max(abs(full), float(np.max(np.abs(vals))) * 1e-3, 1e-300)
    gap = abs(full - half) / scale
    diag = {"half": half, "full": full, "relative_gap": gap, "converged": bool(gap <= tol),
            "bounces": cache.bounces, "degenerate": cache.degenerate}
    if not diag["converged"]:
        logger.info("ergodic average not converged: half/full gap %.3g", gap)
    return full, diag


def bounce_statistics(seeds, eq, horizon: float = 100.0, dt: float = 1e-2, cap: int = 10000):
    """Bounce counts and degenerate flags for a list of :class:`PhaseState`."""
    counts = np.zeros(len(seeds), dtype=int)
    degenerate = np.zeros(len(seeds), dtype=bool)
    for k, seed in enumerate(seeds):
        c = integrate_reflecting(seed, eq, horizon, dt=dt, sample_dt=horizon, max_bounce=cap)
        counts[k] = c.bounces
        degenerate[k] = c.degenerate
    return {"counts": counts, "max": int(counts.max(initial=0)), "over_cap": int(np.sum(counts > cap)),
            "degenerate_fraction": float(degenerate.mean()) if len(seeds) else 0.0}


@dataclass
class SeedCache:
    """Backward trajectories of one species from a batch of phase-space seeds.

    ``samples`` holds meridional states at spacing ``sample_dt`` back to
    ``cache_horizon``; ``ergodic`` holds the time-averaged interpolation
    rows ``[h, vhat_phi h, (vhat_r h_r, vhat_theta h_theta)]`` over
    ``ergodic_horizon``.
    """

    species: int
    grid: object
    samples: np.ndarray
    ergodic: np.ndarray
    sample_dt: float
    ergodic_horizon: float
    half_horizon_gap: np.ndarray
    bounces: np.ndarray
    degenerate: np.ndarray
    with_vector: bool
    _q: dict = field(default_factory=dict, repr=False)

    @property
    def cache_horizon(self) -> float:
        return (self.samples.shape[1] - 1) * self.sample_dt

    def q_rows(self, lam: float) -> np.ndarray:
        """Rows of ``Q_lambda`` at every seed (``lam = 0`` gives the ergodic rows)."""
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        if lam == 0:
            return self.ergodic
        key = float(lam)
        if key not in self._q:
            if len(self._q) >= 2:
                self._q.pop(next(iter(self._q)))
            g = self.grid
            self._q[key] = _q_rows(self.samples, self.ergodic, key, self.sample_dt, g.n_r, g.n_theta,
                                   g.dr, g.dtheta, self.with_vector)
        return self._q[key]

    def local_rows(self) -> np.ndarray:
        """Rows evaluated at the seeds themselves (``lambda = infinity``)."""
        g = self.grid
        return _local_rows(self.samples, self.ergodic.shape[1], self.ergodic.shape[2], g.n_r, g.n_theta,
                           g.dr, g.dtheta, self.with_vector)

    def convergence_failures(self, tol: float = 0.05) -> float:
        ok = ~self.degenerate
        if not np.any(ok):
            return 1.0
        return float(np.mean(self.half_horizon_gap[ok] > tol))


def build_seed_cache(seeds_toroidal, species: int, eq, ergodic_horizon: float = 200.0, cache_horizon: float = 40.0,
                     dt: float = 1e-2, sample_dt: float = 0.05, with_vector: bool = True,
                     max_bounce: int = 1000000) -> SeedCache:
    """Integrate backward trajectories for every seed and cache rows."""
    seeds = np.atleast_2d(np.asarray(seeds_toroidal, dtype=float)).copy()
    seeds[:, 2:4] *= -1.0
    y0 = np.ascontiguousarray(to_meridional(seeds))
    stride = max(1, int(round(sample_dt / dt)))
    sample_dt = stride * dt
    n_steps = int(math.ceil(max(ergodic_horizon, cache_horizon) / dt))
    n_keep = int(round(cache_horizon / sample_dt)) + 1
    a, ff, c1, o1, h1, c2, o2, h2 = _field_args(eq)
    g = eq.grid
    samples, erg, gap, bounces, bad = _seed_batch(
        y0, float(species), a, ff, c1, o1, h1, c2, o2, h2, dt, n_steps, stride, n_keep,
        g.n_r, g.n_theta, g.dr, g.dtheta, with_vector, max_bounce,
    )
    if np.any(bad):
        logger.info("%d of %d seeds flagged degenerate and dropped", int(bad.sum()), bad.size)
        erg[bad] = 0.0
        samples[bad] = 0.0
    return SeedCache(species, g, samples, erg, sample_dt, n_steps * dt, gap, bounces, bad, with_vector)
