"""Self-consistent dynamics of N rigid smoothed charges.

Each particle carries charge 1/N and moves under the form-factor-averaged
Lorentz force of the fields sourced by all particles (itself included; the
smoothed self-field is finite).  Retarded field evaluations during a step
read the frozen pre-step history, so the scheme is an explicit RK4 for a
delay system; the acceleration term sources use the recorded forces, with
the current step's own force entering at a one-step lag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import FieldEvaluator
from .formfactor import RadialChargeModel
from .kinematics import gamma_factor, velocity
from .retarded import EnsembleHistory

__all__ = [
    "MicroState",
    "EnergyReport",
    "GridSpec",
    "SimulationUnstable",
    "init_micro",
    "force_on_particle",
    "step",
    "run",
    "energy",
    "momentum_support",
]


class SimulationUnstable(RuntimeError):
    """Momentum change in one step exceeded the configured cap."""


@dataclass
class GridSpec:
    """Uniform cubic grid for field-energy quadrature."""

    half_width: float
    n_per_axis: int = 32

    def points(self):
        axis = (np.arange(self.n_per_axis) + 0.5) / self.n_per_axis
        axis = -self.half_width + 2.0 * self.half_width * axis
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    @property
    def cell_volume(self):
        return (2.0 * self.half_width / self.n_per_axis) ** 3

    @property
    def spacing(self):
        return 2.0 * self.half_width / self.n_per_axis


@dataclass
class EnergyReport:
    """Kinetic + field energy split, with quadrature metadata."""

    kinetic: float
    field: float
    grid: GridSpec
    boundary_share: float
    static_self_energy: float

    @property
    def total(self):
        return self.kinetic + self.field


class MicroState:
    """State of the rigid-charge system: current phase points plus history.

    step() mutates the underlying history buffers and returns the state, so
    chains like step(step(s, dt), dt) behave as expected.
    """

    def __init__(self, x, xi, chi_n, field_mode="table", t_max=1.0,
                 include_self=True, force_cap=1e3, table_opts=None,
                 cone_order=(10, 12, 8), weights=None, init_models=None,
                 force_override=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xi))):
            raise ValueError("initial configuration must be finite")
        self.n = x.shape[0]
        self.chi = chi_n
        self.weights = np.full(self.n, 1.0 / self.n) if weights is None else np.asarray(weights, float)
        self.hist = EnsembleHistory(x, xi, static_past=True)
        self.t = 0.0
        self.dt = None
        self.field_mode = field_mode
        self.include_self = include_self
        self.force_cap = force_cap
        # external force field (t, x, xi) -> (N, 3); replaces the
        # self-consistent field entirely (used by control runs)
        self.force_override = force_override
        init_single, init_double = (None, None) if init_models is None else init_models
        self.evaluator = FieldEvaluator(
            self.hist, self.weights, chi_n, mode=field_mode, t_max=t_max,
            table_opts=table_opts, cone_order=cone_order,
            init_field=init_single, init_field_double=init_double,
        )
        self._roots = None
        # seed the recorded force at t = 0 with the actual initial force
        k0 = self._forces(0.0, x, xi, np.zeros_like(x))
        self.hist.set_force(0, k0)
        self.speed_violations = 0

    # -- current views -------------------------------------------------------

    @property
    def x(self):
        return self.hist.x[-1]

    @property
    def xi(self):
        return self.hist.xi[-1]

    def _forces(self, t_stage, x, xi, k_lag):
        if self.force_override is not None:
            return self.force_override(t_stage, x, xi)
        if self.field_mode == "off":
            return np.zeros_like(x)
        if self.field_mode == "cone":
            if not self.include_self:
                raise NotImplementedError("self-field exclusion requires kernel smoothing modes")
            return self.evaluator.force(t_stage, x, xi, mode="cone")
        f = self.evaluator.force(
            t_stage, x, xi, mode=self.field_mode, s_init=self._roots,
            exclude_self=np.arange(self.n), self_term=self.include_self,
        )
        self._roots = self.evaluator.last_roots
        return f


def init_micro(Z, f0=None, chi_n=None, **opts) -> MicroState:
    """Build the microscopic state from an initial configuration Z.

    Z is (x, xi) or an (N, 6) array.  Initial fields follow the convention
    E_in = -grad G * rho[f0] (Coulombic) and B_in = 0; the compatible
    microscopic field is then exactly the smoothed Coulomb field of the
    initial atoms, which is what the evaluator's atom model implements (the
    f0 dependence cancels, so f0 is accepted only for signature parity).
    """
    if chi_n is None:
        raise ValueError("a rescaled form factor is required")
    if isinstance(Z, tuple):
        x, xi = Z
    else:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        x, xi = Z[:, :3], Z[:, 3:]
    return MicroState(x, xi, chi_n, **opts)


def force_on_particle(state: MicroState, i: int):
    """Smoothed Lorentz force currently acting on particle i."""
    k_lag = state.hist.force[-1]
    f = state._forces(state.t, state.x, state.xi, k_lag)
    return f[int(i)]


def step(state: MicroState, dt: float) -> MicroState:
    """Advance one RK4 step against the frozen pre-step histories."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.dt is None:
        state.dt = float(dt)
    elif abs(dt - state.dt) > 1e-12 * state.dt:
        raise ValueError("history grid requires a constant step size")
    t0 = state.t
    x0 = state.x.copy()
    xi0 = state.xi.copy()
    k_lag = state.hist.force[-1].copy()

    def rhs(ts, x, xi):
        f = state._forces(ts, x, xi, k_lag)
        return velocity(xi), f

    k1x, k1p = rhs(t0, x0, xi0)
    k2x, k2p = rhs(t0 + 0.5 * dt, x0 + 0.5 * dt * k1x, xi0 + 0.5 * dt * k1p)
    k3x, k3p = rhs(t0 + 0.5 * dt, x0 + 0.5 * dt * k2x, xi0 + 0.5 * dt * k2p)
    k4x, k4p = rhs(t0 + dt, x0 + dt * k3x, xi0 + dt * k3p)
    x_new = x0 + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    xi_new = xi0 + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)

    dxi = np.max(np.linalg.norm(xi_new - xi0, axis=-1))
    if not np.isfinite(dxi) or dxi > state.force_cap * dt:
        raise SimulationUnstable(
            f"momentum change {dxi:.3e} in one step exceeds cap {state.force_cap * dt:.3e}"
        )
    # recorded force: evaluated at the new state against the frozen history
    k_new = state._forces(t0 + dt, x_new, xi_new, k_lag)
    state.hist.append(t0 + dt, x_new, xi_new, k_new)
    state.t = t0 + dt
    if np.any(np.linalg.norm(velocity(xi_new), axis=-1) >= 1.0):
        state.speed_violations += 1
    return state


def run(state: MicroState, dt: float, n_steps: int) -> MicroState:
    for _ in range(n_steps):
        step(state, dt)
    return state


def momentum_support(state: MicroState) -> float:
    """R(t): the largest momentum magnitude currently present."""
    return float(np.max(np.linalg.norm(state.xi, axis=-1))) if state.n else 0.0


def energy(state: MicroState, grid: GridSpec | None = None, mode=None) -> EnergyReport:
    """Total energy: mean relativistic energy plus field energy on a grid.

    The field integral uses the single-smoothed physical field.  A warning
    fires when the outermost cell layer holds more than 1% of the field
    energy (grid truncation suspect).
    """
    if grid is None:
        extent = float(np.max(np.linalg.norm(state.x, axis=-1)))
        grid = GridSpec(half_width=extent + state.t + 2.0 * state.chi.radius + 0.5)
    kin = float(np.sum(state.weights * gamma_factor(state.xi)))
    pts = grid.points()
    bd = state.evaluator.breakdown(state.t, pts, smoothing="single",
                                   mode=mode or state.field_mode)
    dens = 0.5 * (np.sum(bd.E * bd.E, axis=-1) + np.sum(bd.B * bd.B, axis=-1))
    fld = float(np.sum(dens) * grid.cell_volume)
    n_ax = grid.n_per_axis
    mask = np.zeros((n_ax, n_ax, n_ax), dtype=bool)
    mask[[0, -1], :, :] = True
    mask[:, [0, -1], :] = True
    mask[:, :, [0, -1]] = True
    boundary = float(np.sum(dens[mask.reshape(-1)]) * grid.cell_volume)
    share = boundary / fld if fld > 0 else 0.0
    if share > 0.01:
        warnings.warn(
            f"field-energy grid truncation: boundary layer holds {share:.1%}",
            RuntimeWarning,
        )
    self_e = float(np.sum(state.weights**2)) * RadialChargeModel(state.chi).self_field_energy()
    return EnergyReport(kinetic=kin, field=fld, grid=grid,
                        boundary_share=share, static_self_energy=self_e)
