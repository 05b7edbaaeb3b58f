"""Relativistic single-particle kinematics.

Momenta are "relativistic momenta" xi = gamma * v with unit mass, so the
velocity map is xi / sqrt(1 + |xi|^2) and speeds stay strictly below 1.

All functions broadcast over leading axes: a "Vec3" is any float array whose
last axis has length 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PhaseState",
    "FieldSample",
    "velocity",
    "velocity_jacobian",
    "lorentz_force",
    "gamma_factor",
]


def gamma_factor(xi):
    """sqrt(1 + |xi|^2), the energy of a unit-mass particle with momentum xi."""
    xi = np.asarray(xi, dtype=float)
    return np.sqrt(1.0 + np.sum(xi * xi, axis=-1))


def velocity(xi):
    """Velocity of a particle with relativistic momentum xi; |result| < 1."""
    xi = np.asarray(xi, dtype=float)
    return xi / gamma_factor(xi)[..., None]


def velocity_jacobian(xi):
    """Jacobian d v / d xi, shape (..., 3, 3).

    Equals (delta_ij - v_i v_j) / gamma; its operator norm is 1/gamma <= 1,
    comfortably below the coarse bound 2 used in the force-field Lipschitz
    estimates.
    """
    xi = np.asarray(xi, dtype=float)
    g = gamma_factor(xi)
    eye = np.eye(3)
    outer = xi[..., :, None] * xi[..., None, :]
    return eye / g[..., None, None] - outer / (g ** 3)[..., None, None]


def lorentz_force(field, xi):
    """Lorentz force E + v(xi) x B for a FieldSample or an (E, B) pair."""
    if isinstance(field, FieldSample):
        e_field, b_field = field.E, field.B
    else:
        e_field, b_field = field
    e_field = np.asarray(e_field, dtype=float)
    b_field = np.asarray(b_field, dtype=float)
    return e_field + np.cross(velocity(xi), b_field)


@dataclass
class PhaseState:
    """Position and relativistic momentum of one particle."""

    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.xi))):
            raise ValueError("phase state must be finite")

    @property
    def v(self):
        return velocity(self.xi)

    @property
    def speed(self):
        return float(np.linalg.norm(self.v))


@dataclass
class FieldSample:
    """Electric and magnetic field at one spacetime point."""

    E: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
