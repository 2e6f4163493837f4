"""Quadruped leg kinematics (hip-roll, hip-pitch, knee chain per leg).

Leg order is FR, FL, RR, RL. All functions broadcast over leading axes of
the joint/foot arrays, so whole episodes can be processed at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from attennkf.lie import hat3

LEG_NAMES = ("FR", "FL", "RR", "RL")


class Unreachable(ValueError):
    pass


def _default_hips() -> np.ndarray:
    return np.array(
        [[0.188, -0.047, 0.0], [0.188, 0.047, 0.0], [-0.188, -0.047, 0.0], [-0.188, 0.047, 0.0]]
    )


@dataclass(frozen=True)
class RobotModel:
    hip_offsets: np.ndarray = field(default_factory=_default_hips)
    thigh_len: float = 0.213
    shank_len: float = 0.213
    hip_yaw_offset: float = 0.08

    def __post_init__(self):
        hips = np.asarray(self.hip_offsets, dtype=float)
        object.__setattr__(self, "hip_offsets", hips)
        if hips.shape != (4, 3):
            raise ValueError("hip_offsets must be 4x3")
        if self.thigh_len <= 0 or self.shank_len <= 0 or self.hip_yaw_offset < 0:
            raise ValueError("link lengths must be positive")
        mirrored = hips[[1, 0, 3, 2]] * np.array([1.0, -1.0, 1.0])
        if not np.allclose(mirrored, hips):
            raise ValueError("hip offsets must be symmetric across the sagittal plane")

    def side(self, leg: int) -> float:
        """+1 for left legs, -1 for right legs."""
        return 1.0 if self.hip_offsets[leg, 1] > 0 else -1.0

    def nominal_foot(self, leg: int) -> np.ndarray:
        """Foot position (body frame) directly below the hip at zero roll."""
        return self.hip_offsets[leg] + np.array([0.0, self.side(leg) * self.hip_yaw_offset, 0.0])

    def to_dict(self) -> dict:
        return {
            "hip_offsets": self.hip_offsets.tolist(),
            "thigh_len": self.thigh_len,
            "shank_len": self.shank_len,
            "hip_yaw_offset": self.hip_yaw_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotModel":
        return cls(
            hip_offsets=np.asarray(d["hip_offsets"], dtype=float),
            thigh_len=float(d["thigh_len"]),
            shank_len=float(d["shank_len"]),
            hip_yaw_offset=float(d["hip_yaw_offset"]),
        )


def _check_leg(leg: int) -> None:
    if leg not in (0, 1, 2, 3):
        raise ValueError(f"leg index must be 0..3, got {leg}")


def leg_forward_kinematics(q: np.ndarray, leg: int, model: RobotModel) -> np.ndarray:
    """Foot position in the body frame for joint angles ``q = [roll, pitch, knee]``."""
    _check_leg(leg)
    q = np.asarray(q, dtype=float)
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    l1 = model.side(leg) * model.hip_yaw_offset
    l2, l3 = model.thigh_len, model.shank_len
    ux = -l2 * np.sin(q2) - l3 * np.sin(q2 + q3)
    uz = -l2 * np.cos(q2) - l3 * np.cos(q2 + q3)
    c1, s1 = np.cos(q1), np.sin(q1)
    out = np.stack([ux, l1 * c1 - uz * s1, l1 * s1 + uz * c1], axis=-1)
    return out + model.hip_offsets[leg]


def leg_inverse_kinematics(foot: np.ndarray, leg: int, model: RobotModel, tol: float = 1e-9) -> np.ndarray:
    """Joint angles placing the foot at ``foot`` (body frame); knee bends backward (knee <= 0)."""
    _check_leg(leg)
    rel = np.asarray(foot, dtype=float) - model.hip_offsets[leg]
    x, y, z = rel[..., 0], rel[..., 1], rel[..., 2]
    l1 = model.side(leg) * model.hip_yaw_offset
    l2, l3 = model.thigh_len, model.shank_len

    yz2 = y * y + z * z - l1 * l1
    if np.any(yz2 < -tol):
        raise Unreachable("foot inside the hip-roll offset circle")
    leg_len = np.sqrt(np.maximum(yz2, 0.0))
    q1 = np.arctan2(z, y) - np.arctan2(-leg_len, l1)
    q1 = (q1 + np.pi) % (2.0 * np.pi) - np.pi

    r2 = x * x + leg_len * leg_len
    r = np.sqrt(r2)
    if np.any(r > l2 + l3 + tol) or np.any(r < abs(l2 - l3) - tol):
        raise Unreachable(f"foot outside the leg workspace (reach {np.max(r):.6f} m)")
    cos_knee = np.clip((r2 - l2 * l2 - l3 * l3) / (2.0 * l2 * l3), -1.0, 1.0)
    q3 = -np.arccos(cos_knee)
    a = l2 + l3 * np.cos(q3)
    b = l3 * np.sin(q3)
    q2 = np.arctan2(-x, leg_len) - np.arctan2(b, a)
    return np.stack([q1, q2, q3], axis=-1)


def analytic_leg_jacobian(q: np.ndarray, leg: int, model: RobotModel) -> np.ndarray:
    """d(foot)/d(q) as a (..., 3, 3) array; columns follow the joint order."""
    _check_leg(leg)
    q = np.asarray(q, dtype=float)
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    l1 = model.side(leg) * model.hip_yaw_offset
    l2, l3 = model.thigh_len, model.shank_len
    s2, c2 = np.sin(q2), np.cos(q2)
    s23, c23 = np.sin(q2 + q3), np.cos(q2 + q3)
    c1, s1 = np.cos(q1), np.sin(q1)
    uz = -l2 * c2 - l3 * c23

    J = np.zeros(q.shape[:-1] + (3, 3))
    J[..., 1, 0] = -l1 * s1 - uz * c1
    J[..., 2, 0] = l1 * c1 - uz * s1
    dux2, duz2 = -l2 * c2 - l3 * c23, l2 * s2 + l3 * s23
    dux3, duz3 = -l3 * c23, l3 * s23
    J[..., 0, 1] = dux2
    J[..., 1, 1] = -duz2 * s1
    J[..., 2, 1] = duz2 * c1
    J[..., 0, 2] = dux3
    J[..., 1, 2] = -duz3 * s1
    J[..., 2, 2] = duz3 * c1
    return J


def foot_velocity_world(R, v, omega_body, q_leg, dq_leg, leg: int, model: RobotModel) -> np.ndarray:
    """World-frame foot velocity ``v + R (J dq + omega x d_body)``."""
    d_body = leg_forward_kinematics(q_leg, leg, model)
    J = analytic_leg_jacobian(q_leg, leg, model)
    rel = J @ np.asarray(dq_leg, dtype=float) + hat3(omega_body) @ d_body
    return np.asarray(v, dtype=float) + np.asarray(R) @ rel


def all_legs_kinematics(q12: np.ndarray, model: RobotModel) -> tuple:
    """Body-frame feet (4, 3) and leg Jacobians (4, 3, 3) from the 12 joint angles."""
    q = np.asarray(q12, dtype=float).reshape(4, 3)
    q1, q2, q3 = q[:, 0], q[:, 1], q[:, 2]
    l1 = np.sign(model.hip_offsets[:, 1]) * model.hip_yaw_offset
    l2, l3 = model.thigh_len, model.shank_len
    s2, c2 = np.sin(q2), np.cos(q2)
    s23, c23 = np.sin(q2 + q3), np.cos(q2 + q3)
    c1, s1 = np.cos(q1), np.sin(q1)
    ux = -l2 * s2 - l3 * s23
    uz = -l2 * c2 - l3 * c23
    feet = np.stack([ux, l1 * c1 - uz * s1, l1 * s1 + uz * c1], axis=-1) + model.hip_offsets

    J = np.zeros((4, 3, 3))
    J[:, 1, 0] = -l1 * s1 - uz * c1
    J[:, 2, 0] = l1 * c1 - uz * s1
    duz2 = l2 * s2 + l3 * s23
    duz3 = l3 * s23
    J[:, 0, 1] = uz
    J[:, 1, 1] = -duz2 * s1
    J[:, 2, 1] = duz2 * c1
    J[:, 0, 2] = -l3 * c23
    J[:, 1, 2] = -duz3 * s1
    J[:, 2, 2] = duz3 * c1
    return feet, J
