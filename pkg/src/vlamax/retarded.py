"""Trajectory histories, retarded-time geometry, and field kernels.

The field of a moving smoothed charge is assembled from four pieces: the free
evolution of the initial field, an initial-data "shock" shell, a velocity
(relativistic Coulomb) term and an acceleration (radiation) term.  This module
owns the trajectory bookkeeping, the backward-light-cone root solver and the
pointwise kernels; assembly lives in vlamax.fields.

Histories are sampled on a uniform time grid starting at 0.  Queries before 0
see the particle at rest at its initial position (a Coulombic past), queries
slightly beyond the last sample extrapolate the final Hermite segment, which
is what the integrator needs while a step is in flight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .constants import TOL
from .kinematics import gamma_factor, velocity

__all__ = [
    "EnsembleHistory",
    "TrajectoryHistory",
    "RetardedPoint",
    "HistoryError",
    "DegenerateKernelError",
    "retarded_time",
    "solve_retarded",
    "kernel_alpha0",
    "kernel_alpha_minus1",
    "kernel_grad_alpha0",
    "kernel_k",
    "kernel_k_cross",
    "kernel_e2_matrix",
    "kernel_b2_matrix",
    "E2_SIGN",
]

FOUR_PI = 4.0 * np.pi

# Sign of the acceleration term relative to the contraction Q.K of the
# smoothed gradient kernel with the recorded force.  Pinned by requiring the
# assembled (E, B) of a prescribed smooth trajectory to satisfy the Maxwell
# equations (see tests), which also fixes the far-field of an oscillating
# charge to -K_perp / (4 pi R) at low velocity.
E2_SIGN = 1.0


class HistoryError(RuntimeError):
    """Inconsistent trajectory data (non-monotone cone crossing, bad grid)."""


class DegenerateKernelError(ValueError):
    """Kernel evaluated at a degenerate spacetime configuration."""


# ---------------------------------------------------------------------------
# cubic Hermite helpers (tau may lie outside [0, 1]: extrapolation reuses the
# boundary segment polynomial)


def _hermite(tau, f0, f1, d0, d1, dt):
    t2 = tau * tau
    t3 = t2 * tau
    h00 = 2.0 * t3 - 3.0 * t2 + 1.0
    h10 = t3 - 2.0 * t2 + tau
    h01 = -2.0 * t3 + 3.0 * t2
    h11 = t3 - t2
    return (
        h00[..., None] * f0
        + (dt * h10)[..., None] * d0
        + h01[..., None] * f1
        + (dt * h11)[..., None] * d1
    )


def _hermite_deriv(tau, f0, f1, d0, d1, dt):
    t2 = tau * tau
    dh00 = (6.0 * t2 - 6.0 * tau) / dt
    dh10 = 3.0 * t2 - 4.0 * tau + 1.0
    dh01 = (-6.0 * t2 + 6.0 * tau) / dt
    dh11 = 3.0 * t2 - 2.0 * tau
    return (
        dh00[..., None] * f0
        + dh10[..., None] * d0
        + dh01[..., None] * f1
        + dh11[..., None] * d1
    )


class EnsembleHistory:
    """Uniform-step record of (x, xi, K) for N particles, interpolable in time.

    Positions interpolate with cubic Hermite using the stored velocities as
    slopes; momenta likewise with the recorded forces; forces linearly.
    """

    def __init__(self, x0, xi0, k0=None, static_past=True):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
        if x0.shape != xi0.shape or x0.shape[-1] != 3:
            raise ValueError("x0 and xi0 must both have shape (N, 3)")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(xi0))):
            raise ValueError("history seeds must be finite")
        self.n_particles = x0.shape[0]
        self.static_past = bool(static_past)
        self.dt = None  # fixed by the first append
        cap = 64
        self._x = np.empty((cap, self.n_particles, 3))
        self._xi = np.empty_like(self._x)
        self._v = np.empty_like(self._x)
        self._k = np.empty_like(self._x)
        self.n_samples = 1
        self._x[0] = x0
        self._xi[0] = xi0
        self._v[0] = velocity(xi0)
        self._k[0] = np.zeros_like(x0) if k0 is None else np.asarray(k0, dtype=float)

    # -- storage ------------------------------------------------------------

    def _grow(self):
        cap = self._x.shape[0]
        for name in ("_x", "_xi", "_v", "_k"):
            arr = getattr(self, name)
            new = np.empty((2 * cap,) + arr.shape[1:])
            new[:cap] = arr
            setattr(self, name, new)

    def append(self, t, x, xi, k):
        """Record the state at time t = n_samples * dt; dt is set by the first call."""
        if self.dt is None:
            if t <= 0:
                raise HistoryError("first appended sample must have t > 0")
            self.dt = float(t)
        expected = self.n_samples * self.dt
        if abs(t - expected) > 1e-9 * max(1.0, expected):
            raise HistoryError(f"history requires uniform steps: got t={t}, expected {expected}")
        if self.n_samples == self._x.shape[0]:
            self._grow()
        i = self.n_samples
        self._x[i] = x
        self._xi[i] = xi
        self._v[i] = velocity(xi)
        self._k[i] = k
        self.n_samples += 1

    def set_force(self, index, k):
        self._k[index] = k

    @property
    def t_end(self):
        if self.dt is None:
            return 0.0
        return (self.n_samples - 1) * self.dt

    @property
    def x(self):
        return self._x[: self.n_samples]

    @property
    def xi(self):
        return self._xi[: self.n_samples]

    @property
    def v(self):
        return self._v[: self.n_samples]

    @property
    def force(self):
        return self._k[: self.n_samples]

    def particle(self, i) -> "TrajectoryHistory":
        return TrajectoryHistory(self, int(i))

    # -- interpolation ------------------------------------------------------

    def _segment(self, s):
        """Clamp times to segments; returns (idx, tau) with tau free to leave [0,1]."""
        if self.dt is None:
            idx = np.zeros(np.shape(s), dtype=int)
            return idx, np.asarray(s, dtype=float)
        idx = np.clip(np.floor(np.asarray(s) / self.dt).astype(int), 0, self.n_samples - 2)
        tau = np.asarray(s) / self.dt - idx
        return idx, tau

    def state_flat(self, s, j, need=("x", "v", "xi", "k")):
        """Interpolated state for flat arrays of times s and particle indices j.

        Times below 0 return the static past (initial position, zero momentum)
        when static_past is set; otherwise they clamp into the first segment.
        """
        s = np.asarray(s, dtype=float)
        j = np.asarray(j, dtype=int)
        out = {}
        if self.n_samples == 1 or self.dt is None:
            # bootstrap: ballistic continuation of the initial state
            x0 = self._x[0, j]
            v0 = self._v[0, j]
            xi0 = self._xi[0, j]
            k0 = self._k[0, j]
            tpos = np.clip(s, 0.0, None)[..., None]
            if "x" in need:
                out["x"] = x0 + v0 * tpos
            if "v" in need:
                out["v"] = np.where(s[..., None] < 0, 0.0, v0) if self.static_past else v0
            if "xi" in need:
                out["xi"] = np.where(s[..., None] < 0, 0.0, xi0) if self.static_past else xi0
            if "k" in need:
                out["k"] = np.where(s[..., None] < 0, 0.0, k0) if self.static_past else k0
            return out

        idx, tau = self._segment(s)
        i1 = idx + 1
        past = s < 0.0
        x_a, x_b = self._x[idx, j], self._x[i1, j]
        v_a, v_b = self._v[idx, j], self._v[i1, j]
        if "x" in need or "v" in need:
            if "x" in need:
                x_interp = _hermite(tau, x_a, x_b, v_a, v_b, self.dt)
                out["x"] = np.where(past[..., None], self._x[0, j], x_interp) if self.static_past else x_interp
            if "v" in need:
                v_interp = _hermite_deriv(tau, x_a, x_b, v_a, v_b, self.dt)
                out["v"] = np.where(past[..., None], 0.0, v_interp) if self.static_past else v_interp
        if "xi" in need:
            xi_interp = _hermite(tau, self._xi[idx, j], self._xi[i1, j], self._k[idx, j], self._k[i1, j], self.dt)
            out["xi"] = np.where(past[..., None], 0.0, xi_interp) if self.static_past else xi_interp
        if "k" in need:
            tcl = np.clip(tau, 0.0, 1.0)[..., None]
            k_interp = (1.0 - tcl) * self._k[idx, j] + tcl * self._k[i1, j]
            out["k"] = np.where(past[..., None], 0.0, k_interp) if self.static_past else k_interp
        return out

    def position_at(self, s):
        """Positions of all particles at (scalar) time s, shape (N, 3)."""
        j = np.arange(self.n_particles)
        return self.state_flat(np.full(self.n_particles, float(s)), j, need=("x",))["x"]


class TrajectoryHistory:
    """Single-particle view of an EnsembleHistory (the per-particle record)."""

    def __init__(self, ensemble: EnsembleHistory, index: int = 0):
        self.ensemble = ensemble
        self.index = index

    @classmethod
    def from_samples(cls, dt, x, xi, k=None, static_past=True):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        k = np.zeros_like(x) if k is None else np.asarray(k, dtype=float)
        hist = EnsembleHistory(x[0][None], xi[0][None], k[0][None], static_past=static_past)
        for m in range(1, x.shape[0]):
            hist.append(m * dt, x[m][None], xi[m][None], k[m][None])
        return cls(hist, 0)

    @classmethod
    def static_particle(cls, x0, t_end, dt=1.0, xi0=None):
        """A particle at rest at x0 with history covering [0, t_end]."""
        n = max(2, int(np.ceil(t_end / dt)) + 1)
        xi0 = np.zeros(3) if xi0 is None else np.asarray(xi0, dtype=float)
        x = np.tile(np.asarray(x0, dtype=float), (n, 1))
        xi = np.tile(xi0, (n, 1))
        return cls.from_samples(t_end / (n - 1), x, xi)

    @property
    def static_past(self):
        return self.ensemble.static_past

    @property
    def t_end(self):
        return self.ensemble.t_end

    def state(self, s, need=("x", "v", "xi", "k")):
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        j = np.full(s_arr.shape, self.index, dtype=int)
        out = self.ensemble.state_flat(s_arr, j, need=need)
        if np.isscalar(s) or np.asarray(s).ndim == 0:
            return {k: v[0] for k, v in out.items()}
        return out

    def position(self, s):
        return self.state(s, need=("x",))["x"]

    def momentum(self, s):
        return self.state(s, need=("xi",))["xi"]

    def force(self, s):
        return self.state(s, need=("k",))["k"]


@dataclass
class RetardedPoint:
    """Where and how a trajectory crosses the backward light cone of (t, x)."""

    t_ret: float
    x: np.ndarray
    xi: np.ndarray
    force: np.ndarray
    n: np.ndarray
    distance: float
    one_minus_nv: float


# ---------------------------------------------------------------------------
# retarded-time solver


def _ensemble_of(hist):
    if isinstance(hist, TrajectoryHistory):
        return hist.ensemble, np.array([hist.index])
    return hist, np.arange(hist.n_particles)


def solve_retarded_pairs(hist: EnsembleHistory, t: float, pts, cols, s_init=None):
    """Backward-light-cone crossing times for paired (point, particle) queries.

    pts (K, 3) and cols (K,) pair each query point with one source index.
    Returns (s, valid): valid marks pairs whose initial source position lies
    inside the backward cone of (t, point) -- the crossing then happens at
    s >= 0 and is unique because trajectories are sub-luminal.

    s_init, if given, warm-starts a guarded Newton iteration; entries that
    fail to converge fall back to bisection on [0, t].
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    cols = np.asarray(cols, dtype=int)
    d0 = np.linalg.norm(pts - hist._x[0][cols], axis=-1)
    valid = d0 <= t
    s_full = np.zeros(pts.shape[0])
    sel = np.nonzero(valid)[0]
    if sel.size == 0:
        return s_full, valid
    pts = pts[sel]
    cols = cols[sel]

    def h_and_slope(s, with_slope=True):
        st = hist.state_flat(s, cols, need=("x", "v") if with_slope else ("x",))
        diff = pts - st["x"]
        dist = np.linalg.norm(diff, axis=-1)
        h = dist - (t - s)
        if not with_slope:
            return h, None
        with np.errstate(invalid="ignore", divide="ignore"):
            n_hat = diff / np.maximum(dist, 1e-300)[:, None]
        slope = 1.0 - np.sum(n_hat * st["v"], axis=-1)
        return h, slope

    s = None
    todo = np.ones(sel.size, dtype=bool)
    if s_init is not None:
        s = np.clip(np.asarray(s_init, dtype=float)[sel], 0.0, t)
        for _ in range(6):
            h, slope = h_and_slope(s)
            bad_slope = slope <= 1e-12
            slope = np.where(bad_slope, 1.0, slope)
            s = np.clip(s - h / slope, 0.0, t)
            todo = (np.abs(h) > 1e-3 * TOL.retarded_residual) | bad_slope
            if not np.any(todo):
                break
        else:
            todo = np.abs(h_and_slope(s, with_slope=False)[0]) > 1e-3 * TOL.retarded_residual
    if s is None:
        s = np.zeros(sel.size)

    if np.any(todo):
        lo = np.zeros(np.count_nonzero(todo))
        hi = np.full_like(lo, float(t))
        sub_pts = pts[todo]
        sub_cols = cols[todo]

        def h_of(sv):
            st = hist.state_flat(sv, sub_cols, need=("x",))
            return np.linalg.norm(sub_pts - st["x"], axis=-1) - (t - sv)

        n_iter = max(8, int(np.ceil(np.log2(max(t, 1e-30) / TOL.retarded_bisect_width))))
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            go_right = h_of(mid) < 0.0
            lo = np.where(go_right, mid, lo)
            hi = np.where(go_right, hi, mid)
        s[todo] = 0.5 * (lo + hi)
        h, slope = h_and_slope(s)
        if np.any(slope <= 0):
            raise HistoryError("non-monotone light-cone crossing: history is superluminal")
        s = np.clip(s - h / slope, 0.0, t)

    h, _ = h_and_slope(s, with_slope=False)
    if np.any(np.abs(h) > TOL.retarded_residual * max(1.0, t)):
        worst = float(np.max(np.abs(h)))
        raise HistoryError(f"retarded-time residual {worst:.2e} above tolerance")
    s_full[sel] = s
    return s_full, valid


def solve_retarded(hist: EnsembleHistory, t: float, points, s_init=None, active=None):
    """Rectangular variant: crossing times for all (point, particle) pairs.

    Returns (s (m, N), valid (m, N)); see solve_retarded_pairs.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = points.shape[0]
    n = hist.n_particles
    x0 = hist._x[0]
    d0 = np.linalg.norm(points[:, None, :] - x0[None, :, :], axis=-1)
    valid = d0 <= t
    if active is not None:
        valid &= active
    s_out = np.zeros((m, n))
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        return s_out, valid
    s_init_flat = None if s_init is None else np.asarray(s_init)[rows, cols]
    s_flat, ok = solve_retarded_pairs(hist, t, points[rows], cols, s_init=s_init_flat)
    s_out[rows, cols] = s_flat
    valid[rows, cols] &= ok
    return s_out, valid


def retarded_time(hist, t: float, x) -> Optional[RetardedPoint]:
    """Solve the light-cone crossing for one trajectory and one event (t, x).

    Returns None when the trajectory's initial position lies outside the
    backward cone (the crossing, if any, would predate the history).
    """
    ensemble, idx = _ensemble_of(hist)
    x = np.asarray(x, dtype=float)
    if isinstance(hist, TrajectoryHistory):
        sub = ensemble
        j = hist.index
    else:
        sub, j = ensemble, 0
    s_grid, valid = solve_retarded(sub, t, x[None], active=None)
    if not valid[0, j]:
        return None
    s = float(s_grid[0, j])
    st = sub.state_flat(np.array([s]), np.array([j]))
    y = st["x"][0]
    diff = x - y
    dist = float(np.linalg.norm(diff))
    n_hat = diff / dist if dist > 0 else np.zeros(3)
    v = st["v"][0]
    return RetardedPoint(
        t_ret=s,
        x=y,
        xi=st["xi"][0],
        force=st["k"][0],
        n=n_hat,
        distance=dist,
        one_minus_nv=float(1.0 - n_hat @ v),
    )


# ---------------------------------------------------------------------------
# Lienard-Wiechert kernels
#
# alpha^0 and alpha^-1 are homogeneous of degree 0 and -1 in (t, x); the
# on-cone kernels below absorb the cone measure 1 / (4 pi R (1 - n.v)).


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("kernel input must be finite")


def kernel_alpha0(t, x, xi):
    """(x - t v) / (t - v.x)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    v = velocity(xi)
    den = np.asarray(t - np.sum(v * x, axis=-1))
    if np.any(np.abs(den) < TOL.kernel_degenerate):
        raise DegenerateKernelError("alpha kernel denominator t - v.x vanished")
    return (x - np.asarray(t)[..., None] * v) / den[..., None]


def kernel_alpha_minus1(t, x, xi):
    """(1 - v^2)(x - t v) / (t - v.x)^2."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    v = velocity(xi)
    v2 = np.sum(v * v, axis=-1)
    den = np.asarray(t - np.sum(v * x, axis=-1))
    if np.any(np.abs(den) < TOL.kernel_degenerate):
        raise DegenerateKernelError("alpha kernel denominator t - v.x vanished")
    return ((1.0 - v2) / den ** 2)[..., None] * (x - np.asarray(t)[..., None] * v)


def kernel_grad_alpha0(t, x, xi):
    """Jacobian of alpha^0 with respect to xi, shape (..., 3, 3).

    Row index: alpha component; column index: momentum derivative.  Matches
    central finite differences of kernel_alpha0 and reduces on the cone at
    xi = 0 to n n^T - I.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    t = np.asarray(t, dtype=float)
    v = velocity(xi)
    g = gamma_factor(xi)
    den = t - np.sum(v * x, axis=-1)
    if np.any(np.abs(den) < TOL.kernel_degenerate):
        raise DegenerateKernelError("alpha kernel denominator t - v.x vanished")
    eye = np.eye(3)
    vv = v[..., :, None] * v[..., None, :]
    first = (t * den)[..., None, None] * (vv - eye)
    left = x - t[..., None] * v
    right = x - np.sum(v * x, axis=-1)[..., None] * v
    second = left[..., :, None] * right[..., None, :]
    return (first + second) / (g * den * den)[..., None, None]


def _cone_geometry(x, xi):
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    dist = np.linalg.norm(x, axis=-1)
    if np.any(dist < TOL.kernel_degenerate):
        raise DegenerateKernelError("cone kernel evaluated at |x| ~ 0")
    n_hat = x / dist[..., None]
    v = velocity(xi)
    one_minus_nv = 1.0 - np.sum(v * n_hat, axis=-1)
    return dist, n_hat, v, one_minus_nv


def kernel_k(x, xi):
    """Velocity kernel (1-v^2)(n - v) / (4 pi (1 - v.n)^3 |x|^2).

    At xi = 0 this is the Coulomb field n / (4 pi |x|^2) of a unit charge.
    """
    dist, n_hat, v, omnv = _cone_geometry(x, xi)
    v2 = np.sum(v * v, axis=-1)
    pref = (1.0 - v2) / (FOUR_PI * omnv ** 3 * dist ** 2)
    return pref[..., None] * (n_hat - v)


def kernel_k_cross(x, xi):
    """Magnetic partner n(x) x k(x, xi) of the velocity kernel."""
    dist, n_hat, v, omnv = _cone_geometry(x, xi)
    v2 = np.sum(v * v, axis=-1)
    pref = (1.0 - v2) / (FOUR_PI * omnv ** 3 * dist ** 2)
    return pref[..., None] * np.cross(n_hat, n_hat - v)


def kernel_e2_matrix(x, xi):
    """On-cone acceleration kernel matrix Q(x, xi), shape (..., 3, 3).

    The acceleration field of one source is E2_SIGN * Q @ K(t_ret); Q is the
    alpha^0 momentum Jacobian evaluated on the cone (t = |x|), divided by the
    cone measure 4 pi |x| (1 - v.n).
    """
    dist, n_hat, v, omnv = _cone_geometry(x, xi)
    grad = kernel_grad_alpha0(dist, x, xi)
    return grad / (FOUR_PI * dist * omnv)[..., None, None]


def _cross_matrix(n_hat):
    """Matrix [n]_x with [n]_x w = n x w."""
    zeros = np.zeros_like(n_hat[..., 0])
    return np.stack(
        [
            np.stack([zeros, -n_hat[..., 2], n_hat[..., 1]], axis=-1),
            np.stack([n_hat[..., 2], zeros, -n_hat[..., 0]], axis=-1),
            np.stack([-n_hat[..., 1], n_hat[..., 0], zeros], axis=-1),
        ],
        axis=-2,
    )


def kernel_b2_matrix(x, xi):
    """Magnetic partner [n]_x Q of the acceleration kernel matrix."""
    dist, n_hat, v, omnv = _cone_geometry(x, xi)
    q = kernel_e2_matrix(x, xi)
    return _cross_matrix(n_hat) @ q
