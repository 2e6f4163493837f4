"""Contact-aided invariant EKF on SE_{N+2}(3) with IMU biases.

Right-invariant error ``eta = X_hat X^-1`` is used throughout, with the
error-state ordering ``[theta, v, p, d_1..d_4, b_g, b_a]`` (27 dims). Feet
keep fixed slots in the group matrix and covariance; an inactive foot has
its cross-covariances zeroed and a large diagonal variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attennkf.lie import adjoint_sek3, exp_so3, exp_sek3, hat3, log_so3
from attennkf.sim.kinematics import RobotModel, all_legs_kinematics

GRAVITY = np.array([0.0, 0.0, -9.81])
NUM_FEET = 4
DIM = 27
GROUP_DIM = 21
ROT, VEL, POS = slice(0, 3), slice(3, 6), slice(6, 9)
BG, BA = slice(21, 24), slice(24, 27)
INACTIVE_VAR = 1e4
MAX_CONDITION = 1e12


def foot_slice(i: int) -> slice:
    return slice(9 + 3 * i, 12 + 3 * i)


class NonFiniteInput(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    gyro: float = 0.005
    accel: float = 0.05
    gyro_bias: float = 1e-4
    accel_bias: float = 1e-3
    contact: float = 0.001  # foot random walk, m/sqrt(s)
    kinematic: float = 0.005  # measurement std, m
    init_rot: float = 0.01
    init_vel: float = 0.01
    init_pos: float = 0.01
    init_gyro_bias: float = 0.005
    init_accel_bias: float = 0.05

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"noise parameter {k} must be >= 0")


@dataclass
class FilterState:
    X: np.ndarray  # (9, 9) group element: R, v, p, d_1..d_4
    active: np.ndarray  # (4,) bool
    bias_gyro: np.ndarray
    bias_accel: np.ndarray
    P: np.ndarray  # (27, 27)

    @property
    def R(self) -> np.ndarray:
        return self.X[:3, :3]

    @property
    def v(self) -> np.ndarray:
        return self.X[:3, 3]

    @property
    def p(self) -> np.ndarray:
        return self.X[:3, 4]

    def foot(self, i: int) -> np.ndarray:
        return self.X[:3, 5 + i]

    def copy(self) -> "FilterState":
        return FilterState(self.X.copy(), self.active.copy(), self.bias_gyro.copy(), self.bias_accel.copy(), self.P.copy())


def init(R, v, p, noise: NoiseParams, bias_gyro=None, bias_accel=None) -> FilterState:
    """Filter state at the given base prior; every foot starts inactive."""
    X = np.eye(9)
    X[:3, :3] = R
    X[:3, 3] = v
    X[:3, 4] = p
    for i in range(NUM_FEET):
        X[:3, 5 + i] = p
    diag = np.concatenate(
        [
            np.full(3, noise.init_rot**2),
            np.full(3, noise.init_vel**2),
            np.full(3, noise.init_pos**2),
            np.full(12, INACTIVE_VAR),
            np.full(3, noise.init_gyro_bias**2),
            np.full(3, noise.init_accel_bias**2),
        ]
    )
    return FilterState(
        X=X,
        active=np.zeros(NUM_FEET, dtype=bool),
        bias_gyro=np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro, dtype=float).copy(),
        bias_accel=np.zeros(3) if bias_accel is None else np.asarray(bias_accel, dtype=float).copy(),
        P=np.diag(diag),
    )


def _deactivate(P: np.ndarray, i: int) -> None:
    s = foot_slice(i)
    P[s, :] = 0.0
    P[:, s] = 0.0
    P[s, s] = INACTIVE_VAR * np.eye(3)


def predict(state: FilterState, gyro, accel, dt: float, noise: NoiseParams) -> FilterState:
    """IMU propagation of the mean and the right-invariant error covariance."""
    gyro = np.asarray(gyro, dtype=float)
    accel = np.asarray(accel, dtype=float)
    if not (dt > 0 and np.all(np.isfinite(gyro)) and np.all(np.isfinite(accel))):
        raise NonFiniteInput("IMU sample or dt is not finite/positive")

    X0 = state.X
    R0 = X0[:3, :3]
    v0 = X0[:3, 3]
    p0 = X0[:3, 4]
    w = gyro - state.bias_gyro
    a_world = R0 @ (accel - state.bias_accel) + GRAVITY

    X = X0.copy()
    X[:3, :3] = R0 @ exp_so3(w * dt)
    X[:3, 3] = v0 + a_world * dt
    X[:3, 4] = p0 + v0 * dt + 0.5 * a_world * dt * dt

    A = np.zeros((DIM, DIM))
    A[ROT, BG] = -R0
    A[VEL, ROT] = hat3(GRAVITY)
    A[VEL, BG] = -hat3(v0) @ R0
    A[VEL, BA] = -R0
    A[POS, VEL] = np.eye(3)
    A[POS, BG] = -hat3(p0) @ R0
    for i in range(NUM_FEET):
        A[foot_slice(i), BG] = -hat3(X0[:3, 5 + i]) @ R0
    # A is nilpotent of order 4, so the cubic series is the exact transition
    Adt = A * dt
    Adt2 = Adt @ Adt
    Phi = np.eye(DIM) + Adt + 0.5 * Adt2 + (Adt2 @ Adt) / 6.0

    qc = np.concatenate(
        [
            np.full(3, noise.gyro**2),
            np.full(3, noise.accel**2),
            np.zeros(3),
            np.full(12, noise.contact**2),
            np.full(3, noise.gyro_bias**2),
            np.full(3, noise.accel_bias**2),
        ]
    )
    G = np.eye(DIM)
    G[:GROUP_DIM, :GROUP_DIM] = adjoint_sek3(X0)
    PhiG = Phi @ G
    Qd = (PhiG * qc) @ PhiG.T * dt
    P = Phi @ state.P @ Phi.T + Qd
    P = 0.5 * (P + P.T)
    for i in range(NUM_FEET):
        if not state.active[i]:
            _deactivate(P, i)
    return FilterState(X, state.active.copy(), state.bias_gyro.copy(), state.bias_accel.copy(), P)


def extract_base_state(state: FilterState) -> np.ndarray:
    """Nine-vector ``[log(R), v, p]``."""
    return np.concatenate([log_so3(state.R), state.v, state.p])


def internal_correction(prior: FilterState, post: FilterState) -> np.ndarray:
    return np.concatenate(
        [log_so3(post.R @ prior.R.T), post.v - prior.v, post.p - prior.p]
    )


def _correct(state: FilterState, feet: list, meas: dict, variances: dict) -> FilterState:
    """Stacked right-invariant kinematic update over ``feet``."""
    m = len(feet)
    if m == 0:
        return state
    H = np.zeros((3 * m, DIM))
    z = np.empty(3 * m)
    Nbar = np.zeros((3 * m, 3 * m))
    R = state.R
    p = state.p
    for j, i in enumerate(feet):
        rows = slice(3 * j, 3 * j + 3)
        H[rows, POS] = -np.eye(3)
        H[rows, foot_slice(i)] = np.eye(3)
        z[rows] = R @ meas[i] + p - state.foot(i)
        Nbar[rows, rows] = variances[i] * np.eye(3)
    PHt = state.P @ H.T
    S = H @ PHt + Nbar
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > MAX_CONDITION:
        raise NumericalFailure("innovation covariance is ill-conditioned")
    K = np.linalg.solve(S, PHt.T).T
    delta = K @ z
    X = exp_sek3(delta[:GROUP_DIM]) @ state.X
    IKH = np.eye(DIM) - K @ H
    P = IKH @ state.P @ IKH.T + K @ Nbar @ K.T
    P = 0.5 * (P + P.T)
    return FilterState(X, state.active.copy(), state.bias_gyro + delta[BG], state.bias_accel + delta[BA], P)


def _contact_step(state, joint_pos, contact_est, model, noise, variance_scale):
    contact_est = np.asarray(contact_est, dtype=bool)
    meas, _ = all_legs_kinematics(joint_pos, model)
    base_var = noise.kinematic**2

    feet, variances = [], {}
    for i in range(NUM_FEET):
        if state.active[i] and contact_est[i] and np.isfinite(variance_scale[i]):
            feet.append(i)
            variances[i] = base_var * variance_scale[i]
    post = _correct(state, feet, meas, variances)
    if post is state:
        post = state.copy()

    for i in range(NUM_FEET):
        if post.active[i] and not contact_est[i]:
            post.active[i] = False
            post.X[:3, 5 + i] = post.p
            _deactivate(post.P, i)
        elif not post.active[i] and contact_est[i]:
            R = post.R
            post.active[i] = True
            post.X[:3, 5 + i] = R @ meas[i] + post.p
            s = foot_slice(i)
            P = post.P
            P[s, :] = P[POS, :]
            P[:, s] = P[:, POS]
            P[s, s] = P[POS, POS] + base_var * np.eye(3)
    return post, internal_correction(state, post)


def update_contact(state: FilterState, joint_pos, joint_vel, contact_est, model: RobotModel, noise: NoiseParams):
    """Kinematic update for active stance feet, then contact bookkeeping.

    Returns the posterior state and the induced base-state change.
    ``joint_vel`` is accepted for interface symmetry with the slip-aware
    variant; the position-level update does not use it.
    """
    return _contact_step(state, joint_pos, contact_est, model, noise, np.ones(NUM_FEET))


@dataclass(frozen=True)
class SRConfig:
    lv_threshold: float = 0.5
    inflation_factor: float = 100.0


def update_contact_sr(state, joint_pos, joint_vel, contact_est, model, noise, slip_levels, sr: SRConfig = SRConfig()):
    """Same as :func:`update_contact` but distrusts feet whose slip level exceeds the threshold.

    An infinite inflation factor drops those feet from the update entirely.
    """
    scale = np.where(np.asarray(slip_levels) > sr.lv_threshold, sr.inflation_factor, 1.0)
    return _contact_step(state, joint_pos, contact_est, model, noise, scale)


def estimated_foot_velocities(state: FilterState, gyro, joint_pos, joint_vel, model: RobotModel) -> np.ndarray:
    """World-frame foot velocities implied by the estimated base state, (4, 3)."""
    w = np.asarray(gyro, dtype=float) - state.bias_gyro
    dq = np.asarray(joint_vel, dtype=float).reshape(4, 3)
    d, J = all_legs_kinematics(joint_pos, model)
    rel = np.einsum("fij,fj->fi", J, dq) + np.cross(w, d)
    return state.v + rel @ state.R.T
