"""Reference-ensemble solver for the regularized kinetic flow.

The smoothed kinetic equation is solved by its own characteristics: M
reference samples of f0, each carrying charge 1/M, move self-consistently in
the field they jointly source.  The characteristic flow map is then realized
by passive tracers integrated through the frozen reference field; tracers do
not source anything.

M controls the mean-field discretization and is independent of the particle
number N of the rigid-charge system being compared against; the cut-off
radius entering the smoothing is the same on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abraham import MicroState, SimulationUnstable, run as run_micro
from .distributions import ProductBump
from .fields import FieldEvaluator, InitialFieldModel, _double_profile
from .kinematics import velocity
from .retarded import EnsembleHistory

__all__ = [
    "ReferenceEnsemble",
    "MeanFieldFlow",
    "FlowRecord",
    "build_reference",
    "evolve_reference",
    "mean_field_force",
    "track_flow",
]


@dataclass
class FlowRecord:
    """Sampled N-particle flow: times plus stacked positions and momenta."""

    times: np.ndarray
    x: np.ndarray   # (n_times, N, 3)
    xi: np.ndarray  # (n_times, N, 3)

    @classmethod
    def from_history(cls, hist: EnsembleHistory):
        n = hist.n_samples
        times = np.arange(n) * (hist.dt or 0.0)
        return cls(times=times, x=hist.x.copy(), xi=hist.xi.copy())

    def position_dev(self, other: "FlowRecord"):
        """max_i |x_i - x'_i| per sample time (infinity norm over particles)."""
        return np.max(np.linalg.norm(self.x - other.x, axis=-1), axis=-1)

    def momentum_dev(self, other: "FlowRecord"):
        return np.max(np.linalg.norm(self.xi - other.xi, axis=-1), axis=-1)


class ReferenceEnsemble:
    """M self-consistent characteristics sampled from f0, weights 1/M."""

    def __init__(self, f0: ProductBump, m_samples: int, chi_n, seed=0,
                 antithetic=True, field_mode="table", t_max=1.0, **opts):
        self.f0 = f0
        self.m = int(m_samples)
        self.chi = chi_n
        self.seed = seed
        rng = np.random.default_rng([int(seed), 0x5EED])
        x, xi = f0.sample(self.m, rng=rng, antithetic=antithetic)
        init_single = InitialFieldModel(chi_n, radial_density=f0.x_density())
        init_double = InitialFieldModel(_double_profile(chi_n), radial_density=f0.x_density())
        self.state = MicroState(
            x, xi, chi_n, field_mode=field_mode, t_max=t_max,
            weights=np.full(self.m, 1.0 / self.m),
            init_models=(init_single, init_double), **opts,
        )

    @property
    def hist(self):
        return self.state.hist

    @property
    def t(self):
        return self.state.t

    @property
    def evaluator(self) -> FieldEvaluator:
        return self.state.evaluator

    def momentum_support(self):
        return float(np.max(np.linalg.norm(self.state.xi, axis=-1)))


def build_reference(f0, m_samples, chi_n, seed=0, **opts) -> ReferenceEnsemble:
    return ReferenceEnsemble(f0, m_samples, chi_n, seed=seed, **opts)


def save_reference(ens: ReferenceEnsemble, path):
    """Persist an evolved reference ensemble (trajectories plus key metadata)."""
    hist = ens.hist
    np.savez_compressed(
        path,
        x=hist.x, xi=hist.xi, force=hist.force,
        dt=np.array(hist.dt or 0.0), seed=np.array(ens.seed),
        m=np.array(ens.m), r_n=np.array(ens.chi.r_n),
        f0_radii=np.array([ens.f0.x_radius, ens.f0.xi_radius]),
    )


def load_reference(path, chi_n, field_mode="table", t_max=None, **opts) -> ReferenceEnsemble:
    """Restore a persisted reference ensemble for further use.

    The form factor must match the stored cut-off radius; trajectories are
    replayed into a fresh history so all evaluator machinery works as usual.
    """
    with np.load(path) as data:
        if abs(float(data["r_n"]) - chi_n.r_n) > 1e-12:
            raise ValueError("stored reference was built with a different cut-off")
        f0 = ProductBump(*data["f0_radii"])
        m = int(data["m"])
        x, xi, force = data["x"], data["xi"], data["force"]
        dt = float(data["dt"])
        seed = int(data["seed"])
    ens = ReferenceEnsemble.__new__(ReferenceEnsemble)
    ens.f0 = f0
    ens.m = m
    ens.chi = chi_n
    ens.seed = seed
    from .fields import InitialFieldModel, _double_profile

    init_single = InitialFieldModel(chi_n, radial_density=f0.x_density())
    init_double = InitialFieldModel(_double_profile(chi_n), radial_density=f0.x_density())
    horizon = t_max if t_max is not None else max(dt * (x.shape[0] - 1), dt) + 2 * dt
    state = MicroState(
        x[0], xi[0], chi_n, field_mode=field_mode, t_max=horizon,
        weights=np.full(m, 1.0 / m), init_models=(init_single, init_double), **opts,
    )
    state.hist.set_force(0, force[0])
    for k in range(1, x.shape[0]):
        state.hist.append(k * dt, x[k], xi[k], force[k])
    state.t = dt * (x.shape[0] - 1)
    state.dt = dt if x.shape[0] > 1 else None
    ens.state = state
    return ens


def evolve_reference(ens: ReferenceEnsemble, dt: float, t_final: float) -> ReferenceEnsemble:
    """Advance the self-consistent reference characteristics to t_final."""
    n_steps = int(round((t_final - ens.t) / dt))
    if abs(n_steps * dt - (t_final - ens.t)) > 1e-9:
        raise ValueError("t_final must be a whole number of steps away")
    run_micro(ens.state, dt, n_steps)
    return ens


def mean_field_force(ens: ReferenceEnsemble, t, x, xi):
    """Smoothed Lorentz force of the reference field at one phase point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    out = ens.evaluator.force(t, x, xi, mode=ens.state.field_mode)
    return out[0] if out.shape[0] == 1 else out


@dataclass
class MeanFieldFlow:
    """Tracers carried by the frozen reference field (the lifted flow map)."""

    reference: ReferenceEnsemble
    record: FlowRecord


def track_flow(ens: ReferenceEnsemble, Z, dt: float, t_final: float,
               warn_outside=True, shadow_indices=None) -> MeanFieldFlow:
    """Integrate the N tracers of configuration Z through the reference field.

    The reference must already cover [0, t_final].  Tracers are passive:
    they feel the double-smoothed reference force and source nothing.
    shadow_indices marks tracers that duplicate a reference characteristic;
    their coincident source pair is handled through the same analytic limit
    the reference evolution itself used.
    """
    import warnings

    if isinstance(Z, tuple):
        x, xi = Z
    else:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        x, xi = Z[:, :3], Z[:, 3:]
    x = np.array(x, dtype=float, copy=True)
    xi = np.array(xi, dtype=float, copy=True)
    if ens.t + 1e-9 < t_final:
        raise ValueError("reference ensemble does not cover the requested horizon")
    if warn_outside and not np.all(ens.f0.support_contains(x, xi)):
        warnings.warn("tracer initial data outside supp f0", RuntimeWarning)

    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9:
        raise ValueError("t_final must be a whole number of steps")
    n = x.shape[0]
    times = np.arange(n_steps + 1) * dt
    xs = np.empty((n_steps + 1, n, 3))
    xis = np.empty_like(xs)
    xs[0], xis[0] = x, xi
    roots = None
    ev = ens.evaluator
    mode = ens.state.field_mode
    hist = ens.hist
    step_start = [0]

    def rhs(ts, xc, xic):
        nonlocal roots
        kws = {}
        if shadow_indices is not None:
            # same coincidence-limit treatment the reference evolution used
            kws = dict(exclude_self=np.asarray(shadow_indices, dtype=int))
        f = ev.force(ts, xc, xic, mode=mode, s_init=roots, **kws)
        if mode != "cone":
            roots = ev.last_roots
        return velocity(xic), f

    cap = ens.state.force_cap
    for k in range(n_steps):
        step_start[0] = k
        t0 = times[k]
        k1x, k1p = rhs(t0, xs[k], xis[k])
        k2x, k2p = rhs(t0 + 0.5 * dt, xs[k] + 0.5 * dt * k1x, xis[k] + 0.5 * dt * k1p)
        k3x, k3p = rhs(t0 + 0.5 * dt, xs[k] + 0.5 * dt * k2x, xis[k] + 0.5 * dt * k2p)
        k4x, k4p = rhs(t0 + dt, xs[k] + dt * k3x, xis[k] + dt * k3p)
        xs[k + 1] = xs[k] + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        xis[k + 1] = xis[k] + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        dxi = np.max(np.linalg.norm(xis[k + 1] - xis[k], axis=-1))
        if not np.isfinite(dxi) or dxi > cap * dt:
            raise SimulationUnstable(f"tracer momentum change {dxi:.3e} exceeds cap")
    return MeanFieldFlow(reference=ens, record=FlowRecord(times=times, x=xs, xi=xis))
