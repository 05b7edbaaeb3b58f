"""Initial phase-space densities and samplers.

The default density is a product of radial bumps: compact support in both
position (radius 1) and momentum (radius 1/2), C^1 with total mass one, so
the hypotheses of the quantitative approximation results hold.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss

from .formfactor import FormFactor, TabulatedRadialDensity

__all__ = ["ProductBump", "default_f0"]


class RejectionFloor(RuntimeError):
    """Rejection sampling efficiency collapsed below the configured floor."""


class ProductBump:
    """f0(x, xi) = bump(|x| / r_x) * bump(|xi| / r_xi), normalized."""

    def __init__(self, x_radius=1.0, xi_radius=0.5):
        self.x_radius = float(x_radius)
        self.xi_radius = float(xi_radius)
        base = FormFactor()
        self._profile = base.profile  # normalized: integral over R^3 of profile(|u|) du = 1

    # -- densities -----------------------------------------------------------

    def _radial_factor(self, r, scale):
        return self._profile(np.asarray(r, dtype=float) / scale) / scale**3

    def density(self, x, xi):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        return self._radial_factor(np.linalg.norm(x, axis=-1), self.x_radius) * self._radial_factor(
            np.linalg.norm(xi, axis=-1), self.xi_radius
        )

    def density_z(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.density(z[:, :3], z[:, 3:])

    @property
    def sup_density(self):
        return float(self.density(np.zeros(3), np.zeros(3)))

    def x_density(self, n_grid=1024) -> TabulatedRadialDensity:
        """Spatial charge density rho[f0](|x|) (momenta integrated out)."""
        r = np.linspace(0.0, self.x_radius, n_grid)
        return TabulatedRadialDensity(r, self._radial_factor(r, self.x_radius), self.x_radius)

    def x_second_moment(self, n=512):
        """E |x|^2 under f0, by radial quadrature (test oracle)."""
        gl, glw = leggauss(n)
        r = 0.5 * self.x_radius * (gl + 1.0)
        w = 0.5 * self.x_radius * glw
        dens = self._radial_factor(r, self.x_radius)
        return float(np.sum(w * dens * 4.0 * np.pi * r**4))

    def xi_second_moment(self, n=512):
        gl, glw = leggauss(n)
        r = 0.5 * self.xi_radius * (gl + 1.0)
        w = 0.5 * self.xi_radius * glw
        dens = self._radial_factor(r, self.xi_radius)
        return float(np.sum(w * dens * 4.0 * np.pi * r**4))

    # -- sampling --------------------------------------------------------------

    def _sample_radial(self, n, scale, rng, floor=1e-4):
        """Radii with density ~ profile(r/scale) r^2 via rejection from r^2 dr."""
        out = np.empty(n)
        filled = 0
        attempts = 0
        peak = float(np.max(self._profile(np.linspace(0, 1, 2048))))
        while filled < n:
            m = max(2 * (n - filled), 256)
            r = scale * rng.uniform(0.0, 1.0, m) ** (1.0 / 3.0)
            accept = rng.uniform(0.0, peak, m) < self._profile(r / scale)
            take = min(np.count_nonzero(accept), n - filled)
            out[filled : filled + take] = r[accept][:take]
            filled += take
            attempts += m
            if attempts > 64 and filled / attempts < floor:
                raise RejectionFloor("rejection sampling acceptance below floor")
        return out

    def sample(self, n, rng=None, antithetic=False):
        """n i.i.d. draws (x, xi); antithetic mirrors momenta pairwise."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        n_draw = (n + 1) // 2 if antithetic else n
        rx = self._sample_radial(n_draw, self.x_radius, rng)
        rxi = self._sample_radial(n_draw, self.xi_radius, rng)
        dir_x = rng.normal(size=(n_draw, 3))
        dir_x /= np.linalg.norm(dir_x, axis=-1, keepdims=True)
        dir_xi = rng.normal(size=(n_draw, 3))
        dir_xi /= np.linalg.norm(dir_xi, axis=-1, keepdims=True)
        x = rx[:, None] * dir_x
        xi = rxi[:, None] * dir_xi
        if antithetic:
            x = np.concatenate([x, x])[:n]
            xi = np.concatenate([xi, -xi])[:n]
        return x, xi

    def sample_z(self, n, rng=None, antithetic=False):
        x, xi = self.sample(n, rng=rng, antithetic=antithetic)
        return np.concatenate([x, xi], axis=1)

    def support_contains(self, x, xi):
        return (np.linalg.norm(x, axis=-1) <= self.x_radius) & (
            np.linalg.norm(xi, axis=-1) <= self.xi_radius
        )


def default_f0() -> ProductBump:
    return ProductBump(x_radius=1.0, xi_radius=0.5)
