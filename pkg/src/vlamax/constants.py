"""Central tolerance and unit conventions.

Units: the speed of light, particle mass and total charge are all 1, so
positions, times and momenta are dimensionless and |v| < 1 always.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    """Single source of truth for numerical tolerances used across the package."""

    retarded_residual: float = 1e-10   # |h(t_ret)| after the root solve
    retarded_bisect_width: float = 1e-12
    quad_rel: float = 1e-6             # target relative error of kernel convolutions
    profile_norm: float = 1e-8         # |integral(chi) - 1|
    kernel_degenerate: float = 1e-14   # denominator cutoffs in the LW kernels
    metric_axiom: float = 1e-12        # transport metric identities
    finite_difference: float = 1e-7    # Jacobian vs central differences


TOL = Tolerances()

# Hard bound used when monitoring particle speeds; never enforced dynamically.
SPEED_OF_LIGHT = 1.0
