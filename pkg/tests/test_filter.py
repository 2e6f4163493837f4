from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import logm

from attennkf import filter as F
from attennkf.lie import exp_sek3, exp_so3, inverse_sek3, log_so3
from attennkf.sim.episode import EpisodeConfig, generate_episode
from attennkf.sim.kinematics import RobotModel, all_legs_kinematics
from attennkf.sim.scenario import scenario_episode
from attennkf.slipsig import SlipParams
from attennkf.trace import load_trace, run_filter, save_trace

MODEL = RobotModel()
NOISE = F.NoiseParams()


def sek3_log(X):
    """Generic tangent of a group element via the matrix logarithm (oracle)."""
    L = np.real(logm(X))
    k = X.shape[0] - 3
    return np.concatenate([[L[2, 1], L[0, 2], L[1, 0]], L[:3, 3:].T.reshape(3 * k)])


def active_state(rng):
    st = F.init(exp_so3(rng.standard_normal(3) * 0.3), rng.standard_normal(3) * 0.5, rng.standard_normal(3), NOISE,
                bias_gyro=0.01 * rng.standard_normal(3), bias_accel=0.05 * rng.standard_normal(3))
    for i in range(4):
        st.X[:3, 5 + i] = st.p + rng.standard_normal(3) * 0.3
    st.active[:] = True
    A = rng.standard_normal((F.DIM, F.DIM)) * 0.01
    st.P = A @ A.T + 1e-4 * np.eye(F.DIM)
    return st


def perturbed(st, xi):
    out = st.copy()
    out.X = exp_sek3(xi[: F.GROUP_DIM]) @ st.X
    out.bias_gyro = st.bias_gyro + xi[F.BG]
    out.bias_accel = st.bias_accel + xi[F.BA]
    return out


def error_between(a, b):
    """Right-invariant error of ``a`` relative to ``b`` plus bias difference."""
    return np.concatenate([sek3_log(a.X @ inverse_sek3(b.X)), a.bias_gyro - b.bias_gyro, a.bias_accel - b.bias_accel])


def test_init_prior():
    st = F.init(np.eye(3), np.zeros(3), np.ones(3), NOISE)
    assert st.P.shape == (27, 27) and not st.active.any()
    np.testing.assert_array_equal(np.diag(st.P)[9:21], F.INACTIVE_VAR)


def _transition_column(st, u, gyro, accel, dt, noise):
    st_u = st.copy()
    st_u.P = np.outer(u, u)
    Pu = F.predict(st_u, gyro, accel, dt, noise).P
    j = int(np.argmax(np.abs(u)))
    return Pu[:, j] / np.sqrt(Pu[j, j]) * np.sign(u[j])


@pytest.mark.parametrize("block,tol", [("group", 1e-7), ("bias", 1e-3)])
def test_predict_transition_matches_finite_difference(block, tol):
    # P = u u^T propagates to (Phi u)(Phi u)^T; compare Phi u with a propagated perturbation.
    # Group errors propagate exactly; bias errors differ by the O(g dt^2) of the Euler mean step.
    rng = np.random.default_rng(0)
    zero = F.NoiseParams(gyro=0, accel=0, gyro_bias=0, accel_bias=0, contact=0)
    st = active_state(rng)
    gyro, accel, dt = np.array([0.3, -0.2, 0.5]), np.array([0.5, 0.2, 9.6]), 0.01
    nominal = F.predict(st, gyro, accel, dt, zero)
    for _ in range(5):
        u = rng.standard_normal(F.DIM)
        if block == "group":
            u[F.GROUP_DIM :] = 0.0
        else:
            u[: F.GROUP_DIM] = 0.0
        eps = 1e-6
        moved = F.predict(perturbed(st, eps * u), gyro, accel, dt, zero)
        fd = error_between(moved, nominal) / eps
        assert np.max(np.abs(_transition_column(st, u, gyro, accel, dt, zero) - fd)) < tol


def test_predict_mean_is_strapdown():
    rng = np.random.default_rng(1)
    st = active_state(rng)
    gyro, accel, dt = np.array([0.1, 0.0, -0.4]), np.array([0.0, 0.3, 9.81]), 0.002
    out = F.predict(st, gyro, accel, dt, NOISE)
    w, a = gyro - st.bias_gyro, st.R @ (accel - st.bias_accel) + F.GRAVITY
    np.testing.assert_allclose(out.R, st.R @ exp_so3(w * dt), atol=1e-15)
    np.testing.assert_allclose(out.v, st.v + a * dt, atol=1e-15)
    np.testing.assert_allclose(out.p, st.p + st.v * dt + 0.5 * a * dt * dt, atol=1e-15)
    np.testing.assert_array_equal(out.X[:3, 5:], st.X[:3, 5:])


def test_predict_rejects_nonfinite():
    st = F.init(np.eye(3), np.zeros(3), np.zeros(3), NOISE)
    with pytest.raises(F.NonFiniteInput):
        F.predict(st, [np.nan, 0, 0], [0, 0, 9.81], 0.002, NOISE)
    with pytest.raises(F.NonFiniteInput):
        F.predict(st, [0, 0, 0], [0, 0, 9.81], 0.0, NOISE)


def test_update_matches_textbook_kalman():
    rng = np.random.default_rng(2)
    st = active_state(rng)
    q = np.tile([0.0, 0.8, -1.6], 4) + 0.05 * rng.standard_normal(12)
    meas, _ = all_legs_kinematics(q, MODEL)
    post, dx = F.update_contact(st, q, np.zeros(12), np.ones(4, dtype=bool), MODEL, NOISE)

    H = np.zeros((12, F.DIM))
    z = np.zeros(12)
    for i in range(4):
        H[3 * i : 3 * i + 3, F.POS] = -np.eye(3)
        H[3 * i : 3 * i + 3, F.foot_slice(i)] = np.eye(3)
        z[3 * i : 3 * i + 3] = st.R @ meas[i] + st.p - st.foot(i)
    N = NOISE.kinematic**2 * np.eye(12)
    K = st.P @ H.T @ np.linalg.inv(H @ st.P @ H.T + N)
    delta = K @ z
    np.testing.assert_allclose(post.P, (np.eye(F.DIM) - K @ H) @ st.P, atol=1e-12)
    np.testing.assert_allclose(post.X, exp_sek3(delta[:21]) @ st.X, atol=1e-12)
    np.testing.assert_allclose(post.bias_gyro, st.bias_gyro + delta[F.BG], atol=1e-12)
    np.testing.assert_allclose(dx, np.concatenate([log_so3(post.R @ st.R.T), post.v - st.v, post.p - st.p]), atol=1e-15)


def test_update_keeps_covariance_symmetric_psd():
    rng = np.random.default_rng(3)
    st = active_state(rng)
    q = np.tile([0.0, 0.8, -1.6], 4)
    post, _ = F.update_contact(st, q, np.zeros(12), np.ones(4, dtype=bool), MODEL, NOISE)
    np.testing.assert_array_equal(post.P, post.P.T)
    assert np.linalg.eigvalsh(post.P).min() > 0


def test_new_contact_initialization():
    st = F.init(exp_so3([0.1, 0.2, 0.3]), np.zeros(3), np.array([1.0, 2.0, 0.3]), NOISE)
    q = np.tile([0.0, 0.8, -1.6], 4)
    contact = np.array([True, False, False, False])
    post, dx = F.update_contact(st, q, np.zeros(12), contact, MODEL, NOISE)
    meas, _ = all_legs_kinematics(q, MODEL)
    np.testing.assert_allclose(post.foot(0), st.R @ meas[0] + st.p, atol=1e-15)
    assert post.active.tolist() == [True, False, False, False]
    s = F.foot_slice(0)
    np.testing.assert_array_equal(post.P[s, F.ROT], post.P[F.POS, F.ROT])
    np.testing.assert_allclose(post.P[s, s], post.P[F.POS, F.POS] + NOISE.kinematic**2 * np.eye(3))
    np.testing.assert_array_equal(dx, np.zeros(9))


def test_leaving_contact_resets_foot():
    rng = np.random.default_rng(4)
    st = active_state(rng)
    q = np.tile([0.0, 0.8, -1.6], 4)
    contact = np.array([True, True, False, True])
    post, _ = F.update_contact(st, q, np.zeros(12), contact, MODEL, NOISE)
    s = F.foot_slice(2)
    np.testing.assert_array_equal(post.P[s, s], F.INACTIVE_VAR * np.eye(3))
    assert not post.P[s, : s.start].any() and not post.P[s, s.stop :].any()
    assert not post.active[2]


def test_sr_below_threshold_equals_plain_update():
    rng = np.random.default_rng(5)
    st = active_state(rng)
    q = np.tile([0.0, 0.8, -1.6], 4)
    c = np.ones(4, dtype=bool)
    a, _ = F.update_contact(st, q, np.zeros(12), c, MODEL, NOISE)
    b, _ = F.update_contact_sr(st, q, np.zeros(12), c, MODEL, NOISE, np.full(4, 0.2))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.P, b.P)


def test_sr_inflation_scales_measurement_variance():
    rng = np.random.default_rng(6)
    st = active_state(rng)
    q = np.tile([0.0, 0.8, -1.6], 4)
    c = np.ones(4, dtype=bool)
    sr = F.SRConfig(lv_threshold=0.5, inflation_factor=25.0)
    a, _ = F.update_contact_sr(st, q, np.zeros(12), c, MODEL, NOISE, np.full(4, 0.9), sr)
    b, _ = F.update_contact(st, q, np.zeros(12), c, MODEL, replace(NOISE, kinematic=NOISE.kinematic * 5.0))
    np.testing.assert_allclose(a.X, b.X, atol=1e-12)
    np.testing.assert_allclose(a.P, b.P, atol=1e-12)


def test_sr_infinite_inflation_drops_feet():
    rng = np.random.default_rng(7)
    st = active_state(rng)
    q = np.tile([0.0, 0.8, -1.6], 4)
    sr = F.SRConfig(inflation_factor=np.inf)
    post, dx = F.update_contact_sr(st, q, np.zeros(12), np.ones(4, dtype=bool), MODEL, NOISE, np.ones(4), sr)
    np.testing.assert_array_equal(post.X, st.X)
    np.testing.assert_array_equal(dx, np.zeros(9))


def test_ill_conditioned_innovation_raises():
    rng = np.random.default_rng(8)
    st = active_state(rng)
    st.P = np.zeros((F.DIM, F.DIM))
    with pytest.raises(F.NumericalFailure):
        F.update_contact(st, np.tile([0.0, 0.8, -1.6], 4), np.zeros(12), np.ones(4, dtype=bool), MODEL,
                         replace(NOISE, kinematic=0.0))


def test_estimated_foot_velocity_at_true_state():
    ep = generate_episode(EpisodeConfig(duration_s=1.0))
    for k in range(0, len(ep), 50):
        st = F.init(ep.R[k], ep.v[k], ep.p[k], NOISE)
        fv = F.estimated_foot_velocities(st, ep.omega[k], ep.joint_pos[k], ep.joint_vel[k], MODEL)
        np.testing.assert_allclose(fv, ep.foot_vel_w[k], atol=1e-9)


@pytest.fixture(scope="module")
def short_run():
    ep = generate_episode(EpisodeConfig(duration_s=5.0))
    return ep, run_filter(ep)


def test_noise_free_run_tracks_truth(short_run):
    ep, tr = short_run
    R, v, p = tr.trajectory()
    assert np.max(np.linalg.norm(p - ep.p, axis=1)) < 0.05
    assert np.max(np.linalg.norm(v - ep.v, axis=1)) < 0.02


def test_trace_contents(short_run):
    ep, tr = short_run
    assert len(tr) == len(ep)
    np.testing.assert_array_equal(tr.t, ep.t)
    np.testing.assert_allclose(tr.xbar[:, :3], [log_so3(R) for R in tr.R], atol=1e-15)
    assert np.all(tr.P_diag > 0)
    # stance feet never move, so the slip level stays at the sigmoid floor
    assert tr.slip.max() < 0.05
    np.testing.assert_array_equal(tr.foot_speed[~ep.contact_est], 0.0)


def test_trace_file_roundtrip(short_run, tmp_path):
    _, tr = short_run
    save_trace(tr, tmp_path / "t.bin", {"estimator": "inekf"})
    header, back = load_trace(tmp_path / "t.bin")
    assert header["estimator"] == "inekf"
    for name, a in tr.arrays().items():
        np.testing.assert_array_equal(back.arrays()[name], a)


def test_sr_trace_differs_under_slip():
    ep = generate_episode(replace(scenario_episode(1, True), duration_s=3.0))
    a = run_filter(ep, estimator="inekf", slip_params=SlipParams())
    b = run_filter(ep, estimator="sr", slip_params=SlipParams())
    np.testing.assert_array_equal(a.slip[0], b.slip[0])
    assert not np.array_equal(a.xbar, b.xbar)


def test_unknown_estimator():
    ep = generate_episode(EpisodeConfig(duration_s=0.1))
    with pytest.raises(ValueError):
        run_filter(ep, estimator="ekf")
