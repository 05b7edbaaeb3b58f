import numpy as np
import pytest

from vlamax.abraham import (
    GridSpec,
    SimulationUnstable,
    energy,
    force_on_particle,
    init_micro,
    momentum_support,
    run,
    step,
)
from vlamax.formfactor import RadialChargeModel, radial_convolve, rescale
from vlamax.kinematics import velocity


@pytest.fixture(scope="module")
def chi2(chi):
    return rescale(chi, 2, 1.0 / 12.0)  # the 2-body cut-off


def two_body_state(chi2, mode="direct", d=1.2, xi_mag=0.12, t_max=0.6):
    x0 = np.array([[-d / 2, 0, 0], [d / 2, 0, 0]])
    xi0 = np.array([[xi_mag, 0.06, 0], [-xi_mag, -0.06, 0]])
    return init_micro((x0, xi0), chi_n=chi2, field_mode=mode, t_max=t_max)


def test_free_particle_drift(chi2):
    st = init_micro((np.zeros((1, 3)), np.array([[1.0, 0, 0]])), chi_n=chi2, field_mode="off")
    run(st, 0.05, 10)
    np.testing.assert_allclose(st.x[0], velocity(np.array([1.0, 0, 0])) * 0.5, atol=1e-14)


def test_free_motion_reversible(chi2):
    xi0 = np.array([[0.8, -0.3, 0.2]])
    st = init_micro((np.zeros((1, 3)), xi0), chi_n=chi2, field_mode="off")
    run(st, 0.05, 12)
    # reverse momenta and integrate the same span: returns to the start
    back = init_micro((st.x.copy(), -st.xi.copy()), chi_n=chi2, field_mode="off")
    run(back, 0.05, 12)
    assert np.max(np.abs(back.x[0])) < 1e-12


def test_static_pair_force_oracle(chi2):
    d = 2.2
    st = init_micro(
        (np.array([[-d / 2, 0, 0], [d / 2, 0, 0]]), np.zeros((2, 3))),
        chi_n=chi2, field_mode="direct", t_max=0.5,
    )
    f0 = force_on_particle(st, 0)
    f1 = force_on_particle(st, 1)
    dbl = radial_convolve(chi2, chi2)
    oracle = RadialChargeModel(dbl, charge=0.5).field_magnitude(np.array([d]))[0]
    assert np.linalg.norm(f0) == pytest.approx(oracle, rel=1e-3)
    np.testing.assert_allclose(f0 + f1, 0.0, atol=1e-14)  # action equals reaction at rest
    assert f0[0] < 0 < f1[0]  # like charges repel


def test_single_particle_self_force_vanishes_at_rest(chi2):
    st = init_micro((np.zeros((1, 3)), np.zeros((1, 3))), chi_n=chi2, field_mode="direct", t_max=0.5)
    assert np.linalg.norm(force_on_particle(st, 0)) < 1e-10
    run(st, 0.05, 4)
    assert np.linalg.norm(st.x[0]) < 1e-8  # stays put


def test_determinism_bitwise(chi2):
    def make():
        st = two_body_state(chi2)
        run(st, 0.05, 4)
        return st.hist.x.copy(), st.hist.xi.copy()

    x_a, xi_a = make()
    x_b, xi_b = make()
    np.testing.assert_array_equal(x_a, x_b)
    np.testing.assert_array_equal(xi_a, xi_b)


def test_gauss_constraint_initial_field(chi2, rng):
    # discrete divergence of the initial microscopic field equals the
    # smoothed empirical density (finite-difference oracle)
    x0 = rng.normal(size=(3, 3)) * 0.4
    st = init_micro((x0, np.zeros((3, 3))), chi_n=chi2, field_mode="direct", t_max=0.3)
    model = st.evaluator.init_single
    h = 1e-4
    for _ in range(12):
        p = rng.normal(size=3) * 0.8
        div = 0.0
        for ax in range(3):
            dp = np.zeros(3)
            dp[ax] = h
            e_plus = model.initial_field((p + dp)[None])[0]
            e_minus = model.initial_field((p - dp)[None])[0]
            div += (e_plus[ax] - e_minus[ax]) / (2 * h)
        rho = sum(st.weights[i] * st.chi(p - x0[i]) for i in range(3))
        assert div == pytest.approx(rho, abs=3e-4 + 1e-3 * abs(rho))


def test_momentum_support_examples(chi2):
    st = init_micro((np.zeros((1, 3)), np.zeros((1, 3))), chi_n=chi2, field_mode="off")
    assert momentum_support(st) == 0.0
    st2 = init_micro((np.zeros((2, 3)), np.array([[3.0, 4.0, 0], [0.1, 0, 0]])), chi_n=chi2,
                     field_mode="off")
    assert momentum_support(st2) == pytest.approx(5.0)


def test_rk4_fourth_order_on_stiff_force(chi2):
    # the stepper itself is 4th order: ~16x error drop per halving on a
    # strong smooth force driven through the same step() machinery
    def forced(dt):
        force = lambda ts, x, xi: -8.0 * x + 2.0 * np.sin(3.0 * ts) * np.ones_like(x)
        st = init_micro((np.array([[0.4, 0, 0]]), np.array([[0.2, 0.5, 0]])),
                        chi_n=chi2, field_mode="off")
        st.force_override = force
        run(st, dt, int(round(0.5 / dt)))
        return st.x.copy()

    ref = forced(0.5 / 512)
    errs = [np.max(np.abs(forced(dt) - ref)) for dt in (0.05, 0.025, 0.0125)]
    order1 = np.log2(errs[0] / errs[1])
    order2 = np.log2(errs[1] / errs[2])
    assert order1 > 3.6 and order2 > 3.4, (errs, order1, order2)


def test_self_convergence_on_retarded_run(chi2):
    # on the full retarded system the endpoint error decreases under dt
    # halving until the smoothed-field evaluation floor (~1e-9) is reached
    t_final = 0.4

    def endpoint(dt):
        x0 = np.array([[-0.3, 0, 0], [0.3, 0, 0]])
        xi0 = np.array([[0.6, 0.3, 0], [-0.6, -0.3, 0]])  # glancing pass
        st = init_micro((x0, xi0), chi_n=chi2, field_mode="direct", t_max=0.8)
        run(st, dt, int(round(t_final / dt)))
        return st.x.copy()

    ref = endpoint(0.00125)
    errs = [np.max(np.abs(endpoint(dt) - ref)) for dt in (0.1, 0.05, 0.025)]
    assert errs[0] > errs[1] > errs[2] or errs[2] < 3e-9, errs
    assert np.log2(errs[0] / errs[1]) > 2.0, errs


def test_step_requires_constant_dt(chi2):
    st = two_body_state(chi2)
    step(st, 0.05)
    with pytest.raises(ValueError):
        step(st, 0.07)
    with pytest.raises(ValueError):
        step(st, -0.05)


def test_instability_detector(chi2):
    st = two_body_state(chi2, d=0.5)
    st.force_cap = 1e-9
    with pytest.raises(SimulationUnstable):
        step(st, 0.05)


def test_energy_static_particle(chi2):
    st = init_micro((np.zeros((1, 3)), np.zeros((1, 3))), chi_n=chi2, field_mode="direct", t_max=0.2)
    rep = energy(st, GridSpec(half_width=2.5, n_per_axis=16))
    assert rep.kinetic == pytest.approx(1.0)
    assert rep.total == rep.kinetic + rep.field
    assert rep.static_self_energy > 0


def test_energy_grid_refinement(chi2):
    st = two_body_state(chi2, mode="direct", t_max=0.3)
    run(st, 0.05, 2)
    coarse = energy(st, GridSpec(half_width=3.4, n_per_axis=16), mode="direct")
    fine = energy(st, GridSpec(half_width=3.4, n_per_axis=24), mode="direct")
    assert abs(fine.field - coarse.field) < 0.01 * coarse.field


def test_energy_truncation_warning(chi2):
    st = two_body_state(chi2, mode="direct", t_max=0.3)
    with pytest.warns(RuntimeWarning):
        energy(st, GridSpec(half_width=1.0, n_per_axis=10), mode="direct")


def test_total_force_bound_battery(chi, rng):
    # measured forces stay below a fitted C r_N^-2 across cut-offs and sizes
    worst = 0.0
    for n, gamma in ((4, 1.0 / 6.0), (8, 1.0 / 4.0)):
        chi_n = rescale(chi, n, gamma)
        x0, xi0 = rng.normal(size=(n, 3)) * 0.5, rng.normal(size=(n, 3)) * 0.3
        st = init_micro((x0, xi0), chi_n=chi_n, field_mode="direct", t_max=0.2)
        run(st, 0.05, 2)
        k_lag = st.hist.force[-1]
        f = st._forces(st.t, st.x, st.xi, k_lag)
        worst = max(worst, np.max(np.linalg.norm(f, axis=-1)) * chi_n.r_n**2)
    assert worst < 1.0  # C fitted once, comfortably stable


def test_subluminal_throughout(chi2):
    st = two_body_state(chi2, mode="direct", d=0.8, xi_mag=0.3, t_max=0.4)
    run(st, 0.05, 6)
    assert st.speed_violations == 0
    speeds = np.linalg.norm(velocity(st.hist.xi), axis=-1)
    assert np.all(speeds < 1.0)
