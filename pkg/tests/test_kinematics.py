import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlamax.kinematics import (
    FieldSample,
    PhaseState,
    lorentz_force,
    velocity,
    velocity_jacobian,
)

finite_momenta = st.lists(
    st.floats(-50.0, 50.0, allow_nan=False), min_size=3, max_size=3
).map(np.array)


def test_velocity_examples():
    assert np.allclose(velocity(np.zeros(3)), 0.0)
    np.testing.assert_allclose(velocity(np.array([1.0, 0, 0])), [1 / np.sqrt(2), 0, 0])
    np.testing.assert_allclose(
        velocity(np.array([100.0, 0, 0])), [100 / np.sqrt(10001), 0, 0]
    )


@given(finite_momenta)
@settings(max_examples=200, deadline=None)
def test_velocity_subluminal_and_monotone(xi):
    speed = np.linalg.norm(velocity(xi))
    assert speed < 1.0
    bigger = np.linalg.norm(velocity(1.5 * xi))
    if np.linalg.norm(xi) > 0:
        assert bigger > speed


def test_jacobian_identity_at_rest():
    np.testing.assert_allclose(velocity_jacobian(np.zeros(3)), np.eye(3))


def test_jacobian_symbolic_diagonal():
    # momentum along x with magnitude 1: diag(1/(2 sqrt 2), 1/sqrt 2, 1/sqrt 2)
    jac = velocity_jacobian(np.array([1.0, 0, 0]))
    expected = np.diag([1 / (2 * np.sqrt(2)), 1 / np.sqrt(2), 1 / np.sqrt(2)])
    np.testing.assert_allclose(jac, expected, atol=1e-15)


def test_jacobian_matches_finite_differences(rng):
    for _ in range(50):
        xi = rng.normal(size=3) * 2.0
        jac = velocity_jacobian(xi)
        eps = 1e-5
        fd = np.zeros((3, 3))
        for j in range(3):
            delta = np.zeros(3)
            delta[j] = eps
            fd[:, j] = (velocity(xi + delta) - velocity(xi - delta)) / (2 * eps)
        assert np.max(np.abs(jac - fd)) < 1e-8


def test_jacobian_operator_norm_bound(rng):
    xi = rng.normal(size=(10_000, 3)) * 3.0
    ops = np.linalg.norm(velocity_jacobian(xi), ord=2, axis=(1, 2))
    assert np.all(ops <= 2.0)


def test_lorentz_force_examples():
    e = np.array([1.0, 0, 0])
    assert np.allclose(lorentz_force((e, np.zeros(3)), np.array([3.0, -1, 2])), e)
    out = lorentz_force((np.zeros(3), np.array([0, 0, 1.0])), np.array([1.0, 0, 0]))
    np.testing.assert_allclose(out, [0, -1 / np.sqrt(2), 0])
    # B parallel to v: no magnetic force
    xi = np.array([0.7, 0, 0])
    out = lorentz_force((np.zeros(3), np.array([1.0, 0, 0])), xi)
    np.testing.assert_allclose(out, 0.0, atol=1e-16)


@given(finite_momenta, st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=100, deadline=None)
def test_lorentz_force_linear_in_fields(xi, a, b):
    e1, b1 = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -1.0])
    e2, b2 = np.array([0.0, 1.0, 2.0]), np.array([-0.5, 0.2, 0.4])
    lhs = lorentz_force((a * e1 + b * e2, a * b1 + b * b2), xi)
    rhs = a * lorentz_force((e1, b1), xi) + b * lorentz_force((e2, b2), xi)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_phase_state_validation():
    state = PhaseState(np.zeros(3), np.array([3.0, 4.0, 0.0]))
    assert state.speed < 1.0
    with pytest.raises(ValueError):
        PhaseState(np.array([np.inf, 0, 0]), np.zeros(3))
    FieldSample(np.ones(3), np.zeros(3))
