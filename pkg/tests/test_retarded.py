import numpy as np
import pytest

from vlamax.kinematics import velocity, velocity_jacobian
from vlamax.retarded import (
    E2_SIGN,
    DegenerateKernelError,
    EnsembleHistory,
    TrajectoryHistory,
    kernel_alpha0,
    kernel_alpha_minus1,
    kernel_b2_matrix,
    kernel_e2_matrix,
    kernel_grad_alpha0,
    kernel_k,
    kernel_k_cross,
    retarded_time,
    solve_retarded,
)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def wiggly_history(rng, dt=0.02, t_end=3.0, v_scale=0.35):
    amp = rng.uniform(0.05, 0.25, size=3)
    freq = rng.uniform(0.5, 2.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    ts = np.arange(int(round(t_end / dt)) + 1) * dt

    def pos(s):
        return amp * np.sin(np.multiply.outer(s, freq) + phase) * v_scale

    def mom(s):
        v = amp * freq * np.cos(np.multiply.outer(s, freq) + phase) * v_scale
        return v / np.sqrt(1 - np.sum(v * v, axis=-1, keepdims=True))

    return TrajectoryHistory.from_samples(dt, pos(ts), mom(ts))


# ---------------------------------------------------------------------------
# solver


def test_static_particle_retarded_time():
    hist = TrajectoryHistory.static_particle(np.zeros(3), t_end=3.0, dt=0.5)
    rp = retarded_time(hist, 2.0, np.array([0.5, 0, 0]))
    assert rp.t_ret == pytest.approx(1.5, abs=1e-12)
    assert rp.distance == pytest.approx(0.5)
    assert retarded_time(hist, 1.0, np.array([5.0, 0, 0])) is None


def test_constant_velocity_closed_form(rng):
    for _ in range(20):
        v0 = rng.normal(size=3)
        v0 *= rng.uniform(0.1, 0.8) / np.linalg.norm(v0)
        xi0 = v0 / np.sqrt(1 - v0 @ v0)
        dt = 0.05
        ts = np.arange(0, 81) * dt
        hist = TrajectoryHistory.from_samples(dt, np.outer(ts, v0), np.tile(xi0, (81, 1)))
        t = rng.uniform(1.0, 3.5)
        x = rng.normal(size=3)
        rp = retarded_time(hist, t, x)
        a = v0 @ v0 - 1.0
        b = -2 * (x @ v0) + 2 * t
        c = x @ x - t * t
        s_exact = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
        if 0 <= s_exact <= t:
            assert rp is not None
            assert rp.t_ret == pytest.approx(s_exact, abs=1e-9)


def test_residual_always_small(rng):
    for _ in range(10):
        hist = wiggly_history(rng)
        t = 2.5
        pts = rng.normal(size=(40, 3)) * 1.5
        s, valid = solve_retarded(hist.ensemble, t, pts)
        rows, cols = np.nonzero(valid)
        st = hist.ensemble.state_flat(s[rows, cols], cols, need=("x",))
        resid = np.abs(np.linalg.norm(pts[rows] - st["x"], axis=-1) - (t - s[rows, cols]))
        assert resid.size and np.max(resid) < 1e-10


def test_warm_start_matches_cold(rng):
    hist = wiggly_history(rng)
    t = 2.0
    pts = rng.normal(size=(30, 3))
    s_cold, valid = solve_retarded(hist.ensemble, t, pts)
    s_warm, _ = solve_retarded(hist.ensemble, t, pts, s_init=s_cold + 0.01)
    np.testing.assert_allclose(s_warm[valid], s_cold[valid], atol=1e-9)


def test_close_retarded_times_lemma(rng):
    # paired trajectories with bounded speed: crossing points stay within
    # r / (1 - vbar) of each other
    n_pairs = 1000
    violations = 0
    for k in range(n_pairs // 10):
        h1 = wiggly_history(rng, v_scale=0.3)
        h2 = wiggly_history(rng, v_scale=0.3)
        t = 2.8
        for _ in range(10):
            x = rng.normal(size=3) * rng.uniform(0.2, 1.5)
            r1 = retarded_time(h1, t, x)
            r2 = retarded_time(h2, t, x)
            if r1 is None or r2 is None:
                continue
            # measure vbar along the histories
            v1 = np.max(np.linalg.norm(velocity(h1.ensemble.xi[:, 0]), axis=-1))
            v2 = np.max(np.linalg.norm(velocity(h2.ensemble.xi[:, 0]), axis=-1))
            vbar = max(v1, v2)
            same_time = np.linalg.norm(r1.x - h2.position(r1.t_ret))
            cross_time = np.linalg.norm(r1.x - r2.x)
            if cross_time > same_time / (1 - vbar) + 1e-9:
                violations += 1
    assert violations == 0


def test_crossing_slope_positive(rng):
    # uniqueness rests on h'(s) = 1 - n.v >= 1 - vbar > 0 at every crossing
    for _ in range(5):
        hist = wiggly_history(rng, v_scale=0.4)
        t = 2.5
        pts = rng.normal(size=(30, 3)) * 1.2
        s, valid = solve_retarded(hist.ensemble, t, pts)
        rows, cols = np.nonzero(valid)
        st = hist.ensemble.state_flat(s[rows, cols], cols, need=("x", "v"))
        diff = pts[rows] - st["x"]
        dist = np.linalg.norm(diff, axis=-1)
        slope = 1.0 - np.einsum("kd,kd->k", diff / dist[:, None], st["v"])
        vbar = np.max(np.linalg.norm(hist.ensemble.v, axis=-1))
        assert np.all(slope >= 1.0 - vbar - 1e-9)


# ---------------------------------------------------------------------------
# kernels


def test_alpha_kernels_at_rest():
    t, x = 2.0, np.array([0.6, -0.2, 0.3])
    np.testing.assert_allclose(kernel_alpha0(t, x, np.zeros(3)), x / t)
    np.testing.assert_allclose(kernel_alpha_minus1(t, x, np.zeros(3)), x / t**2)


def test_alpha_homogeneity(rng):
    for _ in range(30):
        t = rng.uniform(0.5, 2.0)
        x = rng.normal(size=3)
        xi = rng.normal(size=3) * 0.6
        lam = 2.0
        np.testing.assert_allclose(
            kernel_alpha_minus1(lam * t, lam * x, xi),
            kernel_alpha_minus1(t, x, xi) / lam,
            rtol=1e-12,
        )
        np.testing.assert_allclose(
            kernel_alpha0(lam * t, lam * x, xi), kernel_alpha0(t, x, xi), rtol=1e-12
        )


def test_grad_alpha_on_cone_at_rest():
    x = np.array([0.3, -0.4, 1.2])
    t = np.linalg.norm(x)
    n = x / t
    np.testing.assert_allclose(
        kernel_grad_alpha0(t, x, np.zeros(3)), np.outer(n, n) - np.eye(3), atol=1e-14
    )


def test_grad_alpha_finite_differences(rng):
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=3)
        x *= rng.uniform(0.3, 3.0) / np.linalg.norm(x)
        t = np.linalg.norm(x)
        xi = rng.normal(size=3) * 0.8
        mat = kernel_grad_alpha0(t, x, xi)
        eps = 1e-5
        fd = np.zeros((3, 3))
        for j in range(3):
            d = np.zeros(3)
            d[j] = eps
            fd[:, j] = (kernel_alpha0(t, x, xi + d) - kernel_alpha0(t, x, xi - d)) / (2 * eps)
        worst = max(worst, np.max(np.abs(mat - fd)) / max(1.0, np.max(np.abs(mat))))
    assert worst < 1e-7


def test_scaled_grad_alpha_bound(rng):
    # |(t-s) grad alpha| <= 8 / (1 - vbar)^2 on cone points
    vbar = 0.6
    for _ in range(200):
        omega = rng.normal(size=3)
        omega /= np.linalg.norm(omega)
        tau = rng.uniform(0.1, 3.0)
        xi = rng.normal(size=3)
        xi *= rng.uniform(0, vbar / np.sqrt(1 - vbar**2)) / max(np.linalg.norm(xi), 1e-12)
        mat = tau * kernel_grad_alpha0(tau, tau * omega, xi)
        assert np.linalg.norm(mat, ord=2) <= 8.0 / (1 - vbar) ** 2 + 1e-9


def test_kernel_k_coulomb_exact():
    x = np.array([0.7, -0.1, 0.4])
    r = np.linalg.norm(x)
    np.testing.assert_allclose(
        kernel_k(x, np.zeros(3)), x / r / (4 * np.pi * r**2), rtol=2e-16, atol=0
    )


def test_kernel_k_bound(rng):
    xi_bar = 1.0
    vbar = xi_bar / np.sqrt(1 + xi_bar**2)
    x = rng.normal(size=(10_000, 3))
    xi = rng.normal(size=(10_000, 3))
    xi *= (rng.uniform(0, xi_bar, 10_000) / np.linalg.norm(xi, axis=-1))[:, None]
    vals = np.linalg.norm(kernel_k(x, xi), axis=-1)
    bound = 1.0 / (2 * np.pi * (1 - vbar) ** 3 * np.sum(x * x, axis=-1))
    assert np.all(vals <= bound + 1e-12)


def test_kernel_rotation_equivariance(rng):
    for _ in range(50):
        rot = random_rotation(rng)
        x = rng.normal(size=3)
        xi = rng.normal(size=3) * 0.7
        np.testing.assert_allclose(kernel_k(rot @ x, rot @ xi), rot @ kernel_k(x, xi), atol=1e-12)
        np.testing.assert_allclose(
            kernel_k_cross(rot @ x, rot @ xi), rot @ kernel_k_cross(x, xi), atol=1e-12
        )


def test_kernel_degeneracy_signals():
    with pytest.raises(DegenerateKernelError):
        kernel_k(np.zeros(3), np.zeros(3))
    v = np.array([0.9, 0, 0])
    xi = v / np.sqrt(1 - v @ v)
    with pytest.raises(DegenerateKernelError):
        kernel_alpha0(0.9, np.array([1.0, 0, 0]), xi)  # t = v.x exactly


def test_acceleration_kernel_equals_lienard_wiechert(rng):
    """E2 contraction reproduces the textbook acceleration field exactly."""
    for _ in range(200):
        w = rng.normal(size=3)
        w *= rng.uniform(0.4, 5.0) / np.linalg.norm(w)
        xi = rng.normal(size=3) * 0.8
        force = rng.normal(size=3)
        dist = np.linalg.norm(w)
        n = w / dist
        beta = velocity(xi)
        accel = velocity_jacobian(xi) @ force
        textbook = np.cross(n, np.cross(n - beta, accel)) / (
            4 * np.pi * (1 - n @ beta) ** 3 * dist
        )
        mine = E2_SIGN * (kernel_e2_matrix(w, xi) @ force)
        np.testing.assert_allclose(mine, textbook, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(
            kernel_b2_matrix(w, xi) @ force, np.cross(n, kernel_e2_matrix(w, xi) @ force),
            atol=1e-15,
        )


# ---------------------------------------------------------------------------
# history interpolation


def test_history_interpolation_consistency(rng):
    hist = wiggly_history(rng, dt=0.05)
    s = rng.uniform(0, hist.t_end, 100)
    st = hist.state(s)
    # positions continuous and sub-luminal along the interpolant
    s2 = s + 1e-6
    st2 = hist.state(s2)
    speeds = np.linalg.norm(st2["x"] - st["x"], axis=-1) / 1e-6
    assert np.all(speeds < 1.0)


def test_static_past_queries():
    hist = TrajectoryHistory.from_samples(
        0.1, np.array([[1.0, 0, 0], [1.05, 0, 0]]), np.tile([0.5, 0, 0], (2, 1))
    )
    st = hist.state(np.array([-0.5]))
    np.testing.assert_allclose(st["x"][0], [1.0, 0, 0])
    np.testing.assert_allclose(st["xi"][0], 0.0)


def test_uniform_grid_enforced():
    hist = EnsembleHistory(np.zeros((1, 3)), np.zeros((1, 3)))
    hist.append(0.1, np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    from vlamax.retarded import HistoryError

    with pytest.raises(HistoryError):
        hist.append(0.25, np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
