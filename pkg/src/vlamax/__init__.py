"""vlamax: rigid-charge electrodynamics, its kinetic mean-field flow, and
optimal-transport instruments for comparing the two.

Layout:
    kinematics   momentum-velocity map, Lorentz force
    formfactor   mollifier profiles, smoothing quadrature, radial charge models
    retarded     trajectory histories, retarded-time solver, field kernels
    abraham      the N rigid-charge simulator
    meanfield    reference-ensemble characteristic solver and tracer flows
    transport    Wasserstein distances, the chaos process, concentration rates
    distributions  initial phase-space densities and samplers
    harness      experiment orchestration, sweeps, reporting
"""

from .constants import TOL, Tolerances
from .kinematics import FieldSample, PhaseState, lorentz_force, velocity, velocity_jacobian
from .formfactor import (
    FormFactor,
    QuadratureError,
    RadialChargeModel,
    RescaledFormFactor,
    StrictModeError,
    make_standard_profile,
    rescale,
    smooth_kernel,
)

__version__ = "0.1.0"
