"""Mollifier profiles and real-space smoothing quadrature.

The charge form factor is a normalized C^inf bump chi supported on the unit
ball; its N-rescaled version chi^N(x) = r_N^-3 chi(x/r_N) has support radius
r_N and unit integral.  Everything downstream (smoothed kernels, homogeneous
field evolution, shock terms) only ever needs radial densities, cumulative
charges and potentials, so those live here too.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss

from .constants import TOL

__all__ = [
    "FormFactor",
    "RescaledFormFactor",
    "make_standard_profile",
    "rescale",
    "smooth_kernel",
    "smooth_kernel_grad",
    "RadialChargeModel",
    "TabulatedRadialDensity",
    "radial_convolve",
    "StrictModeError",
    "QuadratureError",
]

# Rescalings with gamma at or above this value leave the regime where the
# quantitative mean-field theorem applies; strict mode rejects them.
GAMMA_STRICT_LIMIT = 1.0 / 12.0


class StrictModeError(ValueError):
    """Raised when a parameter leaves the regime covered by the main theorem."""


class QuadratureError(RuntimeError):
    """Adaptive refinement exhausted its budget without converging."""


def _bump_shape(s):
    """Unnormalized radial bump exp(-1/(1-s^2)) on |s| < 1, zero outside."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    si = s[inside]
    out[inside] = np.exp(-1.0 / (1.0 - si * si))
    return out


def _bump_shape_prime(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    si = s[inside]
    q = 1.0 - si * si
    out[inside] = np.exp(-1.0 / q) * (-2.0 * si / (q * q))
    return out


class FormFactor:
    """Radial mollifier profile with unit integral and support radius 1."""

    def __init__(self, shape=_bump_shape, shape_prime=_bump_shape_prime, n_norm=4096):
        self._shape = shape
        self._shape_prime = shape_prime
        # normalization by radial quadrature: integral over R^3 must be 1
        nodes, weights = leggauss(n_norm)
        s = 0.5 * (nodes + 1.0)
        w = 0.5 * weights
        self._norm = 1.0 / (4.0 * np.pi * np.sum(w * self._shape(s) * s * s))
        self.radius = 1.0

    def profile(self, s):
        """Normalized density at scaled radius s (chi as a function of |x|)."""
        return self._norm * self._shape(s)

    def profile_prime(self, s):
        return self._norm * self._shape_prime(s)

    density = profile

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.profile(np.linalg.norm(x, axis=-1))

    @property
    def sup_norm(self):
        return float(self.profile(0.0))

    def total_charge(self, n=2048):
        nodes, weights = leggauss(n)
        s = 0.5 * (nodes + 1.0)
        w = 0.5 * weights
        return float(4.0 * np.pi * np.sum(w * self.profile(s) * s * s))


class RescaledFormFactor:
    """chi^N(x) = r_N^-3 chi(x / r_N): support radius r_N, unit integral."""

    def __init__(self, base: FormFactor, r_n: float):
        if r_n <= 0:
            raise ValueError("cut-off radius must be positive")
        self.base = base
        self.r_n = float(r_n)
        self.radius = self.r_n

    def density(self, r):
        r = np.asarray(r, dtype=float)
        return self.base.profile(r / self.r_n) / self.r_n ** 3

    def density_prime(self, r):
        r = np.asarray(r, dtype=float)
        return self.base.profile_prime(r / self.r_n) / self.r_n ** 4

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.density(np.linalg.norm(x, axis=-1))

    @property
    def sup_norm(self):
        return float(self.density(0.0))


def make_standard_profile() -> FormFactor:
    """The normalized standard bump; the one profile used throughout."""
    return FormFactor()


def rescale(chi: FormFactor, n_particles: int, gamma: float, strict: bool = False) -> RescaledFormFactor:
    """Build chi^N with r_N = N^-gamma.

    In strict mode, gamma >= 1/12 is rejected: the quantitative chaos bound
    needs the cut-off to shrink slower than N^(-1/12).
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if strict and gamma >= GAMMA_STRICT_LIMIT:
        raise StrictModeError(
            f"gamma={gamma} >= 1/12 leaves the regime of the quantitative bound"
        )
    r_n = float(n_particles) ** (-gamma)
    return RescaledFormFactor(chi, r_n)


# ---------------------------------------------------------------------------
# smoothing quadrature


def _sphere_nodes(n_mu, n_phi):
    """Product rule on S^2: Gauss-Legendre in cos(theta) x uniform azimuth."""
    mu, w_mu = leggauss(n_mu)
    phi = (np.arange(n_phi) + 0.5) * (2.0 * np.pi / n_phi)
    mu_g, phi_g = np.meshgrid(mu, phi, indexing="ij")
    sin_t = np.sqrt(np.clip(1.0 - mu_g ** 2, 0.0, None))
    dirs = np.stack(
        [sin_t * np.cos(phi_g), sin_t * np.sin(phi_g), np.broadcast_to(mu_g, phi_g.shape)],
        axis=-1,
    ).reshape(-1, 3)
    weights = np.broadcast_to(w_mu[:, None] * (2.0 * np.pi / n_phi), mu_g.shape).reshape(-1)
    return dirs, weights


def _cap_sphere_nodes(axis, mu_min, n_mu, n_phi):
    """Directions covering the polar cap mu >= mu_min around the given axis."""
    gl_mu, gl_wmu = leggauss(n_mu)
    mu = 0.5 * (mu_min + 1.0) + 0.5 * (1.0 - mu_min) * gl_mu
    w_mu = 0.5 * (1.0 - mu_min) * gl_wmu
    phi = (np.arange(n_phi) + 0.5) * (2.0 * np.pi / n_phi)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    sin_t = np.sqrt(np.clip(1.0 - mu ** 2, 0.0, None))
    dirs = (
        mu[:, None, None] * axis[None, None, :]
        + sin_t[:, None, None]
        * (np.cos(phi)[None, :, None] * e1[None, None, :] + np.sin(phi)[None, :, None] * e2[None, None, :])
    ).reshape(-1, 3)
    weights = np.broadcast_to(w_mu[:, None] * (2.0 * np.pi / n_phi), (n_mu, n_phi)).reshape(-1)
    return dirs, weights


def _convolve_geometry(chi_n, x, n_mu, n_phi, n_rad):
    """Quadrature nodes u and plain geometric weights for int f(u) k(x-u) du
    with any radial kernel k supported on |x-u| <= r_N.

    Two parametrizations, both chosen so that an integrable |u|^-2
    singularity of f at u = 0 is neutralized by the radial volume element:

    - |x| <= 2 r_N: rays from the origin, restricted to the cap of directions
      that intersect the support ball; each ray integrates over its chord.
    - |x| >  2 r_N: nodes centered on the support ball itself (f is smooth
      there, with bounded variation across the ball).

    Returns (u, geom_w) with geom_w carrying the volume element only; callers
    multiply by the kernel value at x - u.
    """
    x = np.asarray(x, dtype=float)
    r_n = chi_n.radius
    dist = float(np.linalg.norm(x))
    gl_nodes, gl_w = leggauss(n_rad)

    if dist <= 2.0 * r_n:
        if dist > r_n:
            # only directions within the tangent cone meet the ball
            axis = x / dist
            mu_min = np.sqrt(1.0 - (r_n / dist) ** 2) * (1.0 - 1e-12)
        else:
            axis = x / dist if dist > 1e-300 else np.array([0.0, 0.0, 1.0])
            mu_min = -1.0
        dirs, w_sph = _cap_sphere_nodes(axis, mu_min, n_mu, n_phi)
        proj = dirs @ x                              # (n_s,)
        disc = proj ** 2 - (dist * dist - r_n * r_n)
        valid = disc > 0.0
        root = np.sqrt(np.clip(disc, 0.0, None))
        lo = np.clip(proj - root, 0.0, None)
        hi = np.clip(proj + root, 0.0, None)
        valid &= hi > lo
        dirs, w_sph, lo, hi = dirs[valid], w_sph[valid], lo[valid], hi[valid]
        mid = 0.5 * (hi + lo)[:, None]
        half = 0.5 * (hi - lo)[:, None]
        s = mid + half * gl_nodes[None, :]           # (n_s, n_rad)
        u = s[..., None] * dirs[:, None, :]
        geom_w = w_sph[:, None] * (half * gl_w[None, :]) * s * s
    else:
        dirs, w_sph = _sphere_nodes(n_mu, n_phi)
        rho = 0.5 * r_n * (gl_nodes + 1.0)            # (n_rad,)
        w_rho = 0.5 * r_n * gl_w
        u = x[None, None, :] - rho[None, :, None] * dirs[:, None, :]
        geom_w = w_sph[:, None] * (w_rho * rho * rho)[None, :]

    return u.reshape(-1, 3), geom_w.reshape(-1)


def _convolve_nodes(chi_n, x, n_mu, n_phi, n_rad):
    """Nodes and weights (including the chi factor) for (chi^N * f)(x)."""
    u, geom_w = _convolve_geometry(chi_n, x, n_mu, n_phi, n_rad)
    if u.shape[0] == 0:
        return u, geom_w
    x = np.asarray(x, dtype=float)
    r_off = np.linalg.norm(x[None, :] - u, axis=-1)
    return u, geom_w * chi_n.density(r_off)


def _convolve_nodes_batch(chi_n, x_batch, n_mu, n_phi, n_rad, cut_center=None, cut_radius=None):
    """Vectorized _convolve_nodes over a batch of offsets x_batch (B, 3).

    All rows use the ray/chord parametrization (cap-restricted where the
    origin lies outside the support ball).  If cut_center/cut_radius are
    given, each chord is additionally intersected with the ball
    |u - cut_center| <= cut_radius so that integrands truncated by that ball
    (the backward-light-cone membership) stay smooth on the retained nodes.

    Returns nodes (B, Q, 3) and weights (B, Q) with Q = n_mu*n_phi*n_rad;
    rays that miss the support (or the cut ball) carry zero weight.
    """
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=float))
    b = x_batch.shape[0]
    r_n = chi_n.radius
    q_tot = n_mu * n_phi * n_rad
    dist = np.linalg.norm(x_batch, axis=-1)
    gl_r, glw_r = leggauss(n_rad)
    gl_m, glw_m = leggauss(n_mu)
    phi = (np.arange(n_phi) + 0.5) * (2.0 * np.pi / n_phi)
    w_phi = 2.0 * np.pi / n_phi

    axis = np.where(dist[:, None] > 1e-300, x_batch / np.maximum(dist, 1e-300)[:, None], 0.0)
    axis[dist <= 1e-300] = [0.0, 0.0, 1.0]
    ratio = r_n / np.maximum(dist, r_n)  # = 1 wherever dist <= r_n (full sphere)
    mu_min = np.where(
        dist > r_n,
        np.sqrt(np.clip(1.0 - ratio ** 2, 0.0, None)) * (1.0 - 1e-12),
        -1.0,
    )
    helper = np.where(
        (np.abs(axis[:, 0]) < 0.9)[:, None],
        np.broadcast_to([1.0, 0.0, 0.0], axis.shape),
        np.broadcast_to([0.0, 1.0, 0.0], axis.shape),
    )
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(axis, e1)
    mu = 0.5 * (mu_min[:, None] + 1.0) + 0.5 * (1.0 - mu_min[:, None]) * gl_m[None, :]     # (b, n_mu)
    w_mu = 0.5 * (1.0 - mu_min[:, None]) * glw_m[None, :]
    sin_t = np.sqrt(np.clip(1.0 - mu**2, 0.0, None))
    dirs = (
        mu[:, :, None, None] * axis[:, None, None, :]
        + sin_t[:, :, None, None]
        * (np.cos(phi)[None, None, :, None] * e1[:, None, None, :]
           + np.sin(phi)[None, None, :, None] * e2[:, None, None, :])
    )                                                                                      # (b, n_mu, n_phi, 3)
    proj = np.einsum("kmpq,kq->kmp", dirs, x_batch)
    disc = proj**2 - (dist**2 - r_n**2)[:, None, None]
    ok = disc > 0.0
    root = np.sqrt(np.clip(disc, 0.0, None))
    lo = np.clip(proj - root, 0.0, None)
    hi = np.clip(proj + root, 0.0, None)

    if cut_center is not None:
        cut_center = np.atleast_2d(np.asarray(cut_center, dtype=float))
        c_proj = np.einsum("kmpq,kq->kmp", dirs, cut_center)
        c_sq = np.sum(cut_center * cut_center, axis=-1)
        disc_c = c_proj**2 - (c_sq[:, None, None] - float(cut_radius) ** 2)
        ok &= disc_c > 0.0
        root_c = np.sqrt(np.clip(disc_c, 0.0, None))
        lo = np.maximum(lo, c_proj - root_c)
        hi = np.minimum(hi, c_proj + root_c)

    ok &= hi > lo
    mid = 0.5 * (hi + lo)
    half = 0.5 * (hi - lo)
    s = mid[..., None] + half[..., None] * gl_r                                            # (b, n_mu, n_phi, n_rad)
    u = s[..., None] * dirs[:, :, :, None, :]
    w_rad = half[..., None] * glw_r
    r_off = np.linalg.norm(x_batch[:, None, None, None, :] - u, axis=-1)
    w_full = (w_mu[:, :, None, None] * w_phi) * w_rad * s * s * chi_n.density(r_off)
    w_full *= ok[..., None]
    return u.reshape(b, q_tot, 3), w_full.reshape(b, q_tot)


_REFINE_LADDER = ((8, 10, 10), (12, 16, 16), (18, 24, 24), (26, 36, 36), (38, 52, 48))


def smooth_kernel(chi_n, h, x, rel_tol=None, abs_floor=1e-13, order=None):
    """Evaluate the mollified kernel (chi^N * h)(x) by adaptive quadrature.

    h maps an (m, 3) array of points to (m,) or (m, k) values and may have an
    integrable singularity at the origin (|h| ~ |u|^-2 or milder).  Raises
    QuadratureError if successive refinements fail to settle within rel_tol.
    """
    if rel_tol is None:
        rel_tol = TOL.quad_rel
    x = np.asarray(x, dtype=float)

    def evaluate(n_mu, n_phi, n_rad):
        u, w = _convolve_nodes(chi_n, x, n_mu, n_phi, n_rad)
        if u.shape[0] == 0:
            probe = np.asarray(h(np.ones((1, 3))))
            return np.zeros(probe.shape[1:])
        vals = np.asarray(h(u))
        return np.tensordot(w, vals, axes=(0, 0))

    if order is not None:
        return evaluate(*order)

    prev = evaluate(*_REFINE_LADDER[0])
    for rung in _REFINE_LADDER[1:]:
        cur = evaluate(*rung)
        scale = max(float(np.max(np.abs(cur))), abs_floor)
        if float(np.max(np.abs(cur - prev))) <= rel_tol * scale:
            return cur
        prev = cur
    raise QuadratureError(
        f"smoothing quadrature at x={x} did not converge to rel_tol={rel_tol}"
    )


def smooth_kernel_grad(chi_n, h, x, order=(26, 36, 36)):
    """Evaluate (grad chi^N * h)(x): the gradient acting on the mollifier.

    Returns an array of shape (3,) + h-value-shape.  Same node layouts as
    smooth_kernel, but the kernel factor is chi'(|x-u|) (x-u)/|x-u|.
    """
    x = np.asarray(x, dtype=float)
    u, geom_w = _convolve_geometry(chi_n, x, *order)
    offset = x[None, :] - u
    r_off = np.linalg.norm(offset, axis=-1)
    good = r_off > 1e-300
    grad_chi = np.zeros_like(offset)
    grad_chi[good] = (
        offset[good] / r_off[good, None] * chi_n.density_prime(r_off[good])[:, None]
    )
    vals = np.asarray(h(u))
    scalar = vals.ndim == 1
    if scalar:
        vals = vals[:, None]
    contrib = np.einsum("q,qi,qk->ik", geom_w, grad_chi, vals)
    return contrib[:, 0] if scalar else contrib


# ---------------------------------------------------------------------------
# radial charge models


class TabulatedRadialDensity:
    """Radial density known on a dense grid; linear interpolation in between."""

    def __init__(self, r_grid, values, radius):
        self.r_grid = np.asarray(r_grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.radius = float(radius)

    def density(self, r):
        r = np.asarray(r, dtype=float)
        return np.interp(r, self.r_grid, self.values, right=0.0)

    @property
    def sup_norm(self):
        return float(np.max(self.values))


def radial_convolve(dens_a, dens_b, n_grid=1024):
    """3-d convolution of two radial densities, returned as a radial table.

    Uses (f*g)(r) = (2 pi / r) int s f(s) [ G(r+s) - G(|r-s|) ] ds with
    G(t) = int_0^t u g(u) du.
    """
    ra, rb = dens_a.radius, dens_b.radius
    r_out = ra + rb
    t_grid = np.linspace(0.0, r_out * 1.001, 4 * n_grid)
    g_vals = dens_b.density(t_grid) * t_grid
    g_cum = np.concatenate([[0.0], np.cumsum(0.5 * (g_vals[1:] + g_vals[:-1]) * np.diff(t_grid))])

    def g_int(t):
        return np.interp(t, t_grid, g_cum)

    s_grid = np.linspace(0.0, ra, 2 * n_grid)
    f_s = dens_a.density(s_grid) * s_grid
    r_eval = np.linspace(1e-9 * r_out, r_out, n_grid)
    inner = g_int(r_eval[:, None] + s_grid[None, :]) - g_int(np.abs(r_eval[:, None] - s_grid[None, :]))
    integrand = f_s[None, :] * inner
    vals = (2.0 * np.pi / r_eval) * np.trapezoid(integrand, s_grid, axis=1)
    # even extension through r = 0 (radial densities have zero slope there)
    r_full = np.concatenate([[0.0], r_eval])
    v_full = np.concatenate([[vals[0]], vals])
    return TabulatedRadialDensity(r_full, v_full, r_out)


class RadialChargeModel:
    """Charge ball with radial density: cumulative charge, field, potential,
    and the exact free-wave (Kirchhoff) evolution of its Coulomb field.

    The homogeneous field of initial data E_in = -grad G * rho is
    E0(t, x) = d/dt [ t * spherical_mean_t[E_in](x) ], which for a radial
    source reduces to 1-d quadratures of g(s) = s * potential(s).
    """

    def __init__(self, dens, charge=1.0, n_grid=2048):
        from scipy.interpolate import CubicSpline

        self.charge = float(charge)
        self.radius = dens.radius
        r = np.linspace(0.0, self.radius, n_grid)
        rho = dens.density(r) * self.charge
        q_cum = np.concatenate(
            [[0.0], np.cumsum(4.0 * np.pi * 0.5 * (rho[1:] * r[1:] ** 2 + rho[:-1] * r[:-1] ** 2) * np.diff(r))]
        )
        # renormalize tiny quadrature defect so the far field is exactly Coulombic
        renorm = self.charge / q_cum[-1] if q_cum[-1] != 0 else 1.0
        q_cum = q_cum * renorm
        self._r = r
        self._q = q_cum
        self._rho = rho * renorm
        with np.errstate(divide="ignore", invalid="ignore"):
            e_r = np.where(r > 0, q_cum / (4.0 * np.pi * np.maximum(r, 1e-300) ** 2), 0.0)
        self._e_r = e_r
        # potential phi(r) = int_r^inf E_r, with the exact Coulomb tail
        phi_edge = self.charge / (4.0 * np.pi * self.radius)
        inner = np.concatenate(
            [[0.0], np.cumsum(0.5 * (e_r[1:] + e_r[:-1]) * np.diff(r))]
        )
        phi = phi_edge + (inner[-1] - inner)
        self._phi = phi
        # g(s) = s phi(s); its derivatives are analytic in the radial data:
        # g' = phi - s E_r and g'' = -s rho
        self._g = r * phi
        self._g_prime = phi - r * e_r
        self._g3_at = lambda s: float(
            -np.interp(s, r, self._rho)
            - s * np.interp(s, r, np.gradient(self._rho, r))
        )
        self._sp_g = CubicSpline(r, self._g, bc_type=((1, self._g_prime[0]), (1, 0.0)))
        self._sp_gp = CubicSpline(r, self._g_prime)
        self._sp_er = CubicSpline(r, e_r)
        self._sp_phi = CubicSpline(r, phi, bc_type=((1, 0.0), (1, -e_r[-1])))

    # -- radial primitives -------------------------------------------------

    def cumulative_charge(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r >= self.radius, self.charge, np.interp(r, self._r, self._q))

    def field_magnitude(self, r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        out = np.empty_like(r)
        inside = r < self.radius
        out[inside] = self._sp_er(r[inside])
        r_out = np.maximum(r[~inside], 1e-300)
        out[~inside] = self.charge / (4.0 * np.pi * r_out**2)
        return out if out.shape else float(out)

    def potential(self, r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        out = np.empty_like(r)
        inside = r < self.radius
        out[inside] = self._sp_phi(r[inside])
        out[~inside] = self.charge / (4.0 * np.pi * np.maximum(r[~inside], 1e-300))
        return out

    def _g_fn(self, s):
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        inside = s < self.radius
        out[inside] = self._sp_g(s[inside])
        out[~inside] = self.charge / (4.0 * np.pi)
        return out

    def _g_prime_fn(self, s):
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        inside = s < self.radius
        out[inside] = self._sp_gp(s[inside])
        out[~inside] = 0.0
        return out

    def coulomb_field(self, d):
        """Static field -grad G * rho at offsets d from the center, shape (..., 3)."""
        d = np.asarray(d, dtype=float)
        dist = np.linalg.norm(d, axis=-1)
        mag = self.field_magnitude(np.maximum(dist, 1e-300))
        with np.errstate(invalid="ignore"):
            n_hat = np.where(dist[..., None] > 0, d / np.maximum(dist, 1e-300)[..., None], 0.0)
        return mag[..., None] * n_hat

    def kirchhoff_field(self, t, d):
        """Free Maxwell evolution at time t of the initial field coulomb_field.

        d: offsets from the charge center, shape (..., 3).  Exact up to the
        radial table resolution; reduces to coulomb_field at t = 0, vanishes
        once the wave front t > |d| + radius has passed, and equals the
        Coulomb field outside the front.
        """
        t = float(t)
        d = np.asarray(d, dtype=float)
        batch_shape = d.shape[:-1]
        d = d.reshape(-1, 3)
        dist = np.linalg.norm(d, axis=-1)
        dist_safe = np.maximum(dist, 1e-300)
        n_hat = d / dist_safe[:, None]

        b = dist + t
        a = np.abs(dist - t)
        s_val = self._g_fn(b) + np.sign(dist - t) * self._g_fn(a)
        ds_val = self._g_prime_fn(b) + self._g_prime_fn(a)
        num = dist * ds_val - s_val
        with np.errstate(invalid="ignore", divide="ignore"):
            mag = -num / (2.0 * dist_safe ** 2)

        # series branch: near the center the closed form cancels catastrophically
        small = dist < 1e-3 * max(self.radius, t, 1e-12)
        if np.any(small):
            g3 = self._g3_at(t) if t < self.radius else 0.0
            mag = np.where(small, -g3 * dist / 3.0, mag)
        return (mag[:, None] * n_hat).reshape(batch_shape + (3,))

    def self_field_energy(self):
        """(1/2) int |E|^2 of the static smoothed Coulomb field."""
        r_in = self._r
        inner = np.trapezoid(self._e_r ** 2 * r_in ** 2, r_in)
        outer = self.charge ** 2 / (16.0 * np.pi ** 2 * self.radius)
        return 0.5 * 4.0 * np.pi * inner + 0.5 * outer

    def cone_cut_field(self, t, d, n_s=1024):
        """Velocity-term field of this charge held static: the Coulomb field
        sourced only by the part of the density within distance t of the
        evaluation point (the backward-cone membership region).

        Radial in d; each spherical shell s of the density contributes the
        closed-form cap integral
            (s rho(s) / 4 D^2) [ g(R_c) - g(|D-s|) ],  g(R) = R - (D^2-s^2)/R,
        with R_c = min(D+s, t) and zero when t < |D-s|.
        """
        t = float(t)
        d = np.atleast_2d(np.asarray(d, dtype=float))
        dist = np.maximum(np.linalg.norm(d, axis=-1), 1e-300)
        n_hat = d / dist[:, None]
        s = np.linspace(1e-9, self.radius, n_s)
        rho = np.interp(s, self._r, self._rho)
        dd = dist[:, None]
        ss = s[None, :]
        r_lo = np.abs(dd - ss)
        r_hi = np.minimum(dd + ss, t)
        live = r_hi > r_lo
        r_lo_safe = np.maximum(r_lo, 1e-12 * self.radius)
        r_hi_safe = np.maximum(r_hi, 1e-12 * self.radius)
        with np.errstate(invalid="ignore", divide="ignore"):
            g_hi = r_hi_safe - (dd**2 - ss**2) / r_hi_safe
            g_lo = r_lo_safe - (dd**2 - ss**2) / r_lo_safe
            integrand = np.where(live, ss * rho[None, :] / (4.0 * dd**2) * (g_hi - g_lo), 0.0)
        integrand = np.nan_to_num(integrand, nan=0.0, posinf=0.0, neginf=0.0)
        mag = np.trapezoid(integrand, s, axis=1)
        return mag[:, None] * n_hat
