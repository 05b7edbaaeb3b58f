"""Optimal-transport distances between equal-size empirical measures, the
trajectory chaos process, and empirical concentration instruments.

Distances are exact: equal-weight empirical transport reduces to an optimal
assignment, solved with the O(n^3) shortest-augmenting-path method (scipy's
linear_sum_assignment); brute-force permutation checks live in the tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .distributions import ProductBump

__all__ = [
    "EmpiricalMeasure",
    "ChaosMetricConfig",
    "wasserstein_p",
    "wasserstein_brute",
    "winf_upper",
    "chaos_process_J",
    "fournier_rate",
    "concentration_probe",
    "ConcentrationReport",
    "loglog_slope",
]


@dataclass
class EmpiricalMeasure:
    """Equal-weight atoms in R^d."""

    atoms: np.ndarray

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if self.atoms.shape[0] < 1:
            raise ValueError("need at least one atom")
        if not np.all(np.isfinite(self.atoms)):
            raise ValueError("atoms must be finite")

    @property
    def n(self):
        return self.atoms.shape[0]


def _atoms_of(mu):
    return mu.atoms if isinstance(mu, EmpiricalMeasure) else np.atleast_2d(np.asarray(mu, dtype=float))


def wasserstein_p(mu, nu, p=2.0) -> float:
    """Exact W_p between equal-size equal-weight empirical measures."""
    a = _atoms_of(mu)
    b = _atoms_of(nu)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("atoms must be finite")
    if p < 1:
        raise ValueError("order p must be >= 1")
    cost = cdist(a, b) ** p
    rows, cols = linear_sum_assignment(cost)
    return float((cost[rows, cols].sum() / a.shape[0]) ** (1.0 / p))


def wasserstein_brute(mu, nu, p=2.0) -> float:
    """Permutation brute force; only sensible for n <= 8."""
    a = _atoms_of(mu)
    b = _atoms_of(nu)
    n = a.shape[0]
    if n > 8:
        raise ValueError("brute force limited to n <= 8")
    cost = cdist(a, b) ** p
    best = min(sum(cost[i, perm[i]] for i in range(n)) for perm in itertools.permutations(range(n)))
    return float((best / n) ** (1.0 / p))


def winf_upper(x_conf, y_conf) -> float:
    """Index-aligned pairing bound max_i |x_i - y_i|.

    This dominates W_p(mu[X], mu[Y]) for every order p, since the identity
    pairing is one admissible coupling.
    """
    a = _atoms_of(x_conf)
    b = _atoms_of(y_conf)
    if a.shape != b.shape:
        raise ValueError("configurations must be index-aligned with equal sizes")
    return float(np.max(np.linalg.norm(a - b, axis=-1)))


@dataclass
class ChaosMetricConfig:
    """Exponent and particle count entering the chaos process."""

    n_particles: int
    delta: float

    @property
    def lambda_n(self):
        return max(1.0, float(np.sqrt(np.log(self.n_particles))))


def chaos_process_J(micro, mf, cfg: ChaosMetricConfig, t) -> float:
    """Capped weighted sup-deviation between the two trajectory bundles.

    J(t) = min{1, lambda(N) N^delta sup_{s<=t} max_i |x-x'|
                 + N^delta sup_{s<=t} max_i |xi-xi'| }.
    Records must share the time grid; the sup runs over stored samples.
    """
    if micro.times.shape != mf.times.shape or np.max(np.abs(micro.times - mf.times)) > 1e-9:
        raise ValueError("trajectory records are on different time grids")
    window = micro.times <= t + 1e-12
    dev1 = np.max(np.linalg.norm(micro.x[window] - mf.x[window], axis=-1))
    dev2 = np.max(np.linalg.norm(micro.xi[window] - mf.xi[window], axis=-1))
    n_pow = float(cfg.n_particles) ** cfg.delta
    return float(min(1.0, cfg.lambda_n * n_pow * dev1 + n_pow * dev2))


def fournier_rate(n, p, alpha, c=1.0, c_prime=1.0) -> float:
    """Concentration-rate formula for empirical measures in dimension six.

    Three regimes by the order p; the constants c, c' are not computable
    from first principles here and default to one.
    """
    if p < 1 or alpha <= 0:
        raise ValueError("need p >= 1 and alpha > 0")
    n = float(n)
    if p > 3:
        expo = n ** (1.0 - 2.0 * p * alpha)
    elif p == 3:
        expo = n ** (1.0 - 6.0 * alpha) / np.log(2.0 + n ** (3.0 * alpha)) ** 2
    else:
        expo = n ** (1.0 - 6.0 * alpha)
    return float(c_prime * np.exp(-c * expo))


@dataclass
class ConcentrationReport:
    n: int
    p: float
    distances: np.ndarray
    ref_multiple: int
    fallback: bool

    @property
    def median(self):
        return float(np.median(self.distances))

    def quantile(self, q):
        return float(np.quantile(self.distances, q))


def concentration_probe(f0: ProductBump, n, p, seeds, ref_multiple=1,
                        assign_cap=8192) -> ConcentrationReport:
    """Two-sample W_p between N fresh draws and an f0 reference sample.

    The reference holds ref_multiple * N atoms; sample atoms are replicated
    to make the transport an assignment.  If that exceeds the assignment
    budget the probe falls back to an equal-size reference and flags it.
    """
    mult = int(ref_multiple)
    fallback = False
    if mult * int(n) > assign_cap and mult > 1:
        mult = 1
        fallback = True
    dists = []
    for seed in np.atleast_1d(seeds):
        rng_z = np.random.default_rng([int(seed), 0xA11CE])
        rng_ref = np.random.default_rng([int(seed), 0xFACADE])
        z = f0.sample_z(int(n), rng=rng_z)
        ref = f0.sample_z(int(n) * mult, rng=rng_ref)
        z_rep = np.repeat(z, mult, axis=0)
        dists.append(wasserstein_p(z_rep, ref, p))
    return ConcentrationReport(n=int(n), p=float(p), distances=np.asarray(dists),
                               ref_multiple=mult, fallback=fallback)


def loglog_slope(ns, values):
    """Least-squares slope of log(values) against log(ns)."""
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    coef = np.polyfit(np.log(ns), np.log(values), 1)
    return float(coef[0])
