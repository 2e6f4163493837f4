"""Kinematic trot-gait episode generator.

The base follows a smoothed piecewise-constant twist command. Feet are
world-fixed during stance unless a slip segment is active, in which case
they drift with a smoothed planar velocity. Sensor streams are synthesized
from the ground truth:

* IMU samples are interval averages, so integrating sample ``k`` over one
  period with the filter's first-order scheme lands exactly on the truth at
  ``k + 1`` (noise-free case).
* Joint encoders come from inverse kinematics of the true feet.
* Estimated contacts are the true contacts with i.i.d. flips.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from attennkf.lie import exp_so3, log_so3
from attennkf.sim.kinematics import (
    RobotModel,
    analytic_leg_jacobian,
    leg_inverse_kinematics,
)

GRAVITY = np.array([0.0, 0.0, -9.81])
# Trot pairs: FR+RL lead, FL+RR follow half a cycle later.
TROT_OFFSETS = (0.0, 0.5, 0.5, 0.0)


class ConfigInvalid(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class GaitConfig:
    step_freq: float = 2.0
    step_height: float = 0.07
    duty_factor: float = 0.6
    body_height: float = 0.28
    bounce: float = 0.004
    roll_amp: float = 0.015
    pitch_amp: float = 0.01


@dataclass
class SlipConfig:
    # (t_start, t_end, slip_vel_scale [m/s])
    segments: list = field(default_factory=list)
    feet: tuple = (True, True, True, True)
    # "backward": slide against the base's horizontal motion; "random": free heading.
    direction: str = "backward"
    heading_std: float = 0.4
    # per-foot log-normal magnitude modulation (mean one)
    magnitude_std: float = 0.5
    correlation_time: float = 0.3
    ramp_s: float = 0.05


@dataclass
class NoiseConfig:
    gyro_std: float = 0.0
    accel_std: float = 0.0
    joint_pos_std: float = 0.0
    joint_vel_std: float = 0.0
    gyro_bias_walk: float = 0.0
    accel_bias_walk: float = 0.0

    @classmethod
    def default(cls) -> "NoiseConfig":
        return cls(
            gyro_std=0.002,
            accel_std=0.02,
            joint_pos_std=0.001,
            joint_vel_std=0.02,
            gyro_bias_walk=1e-4,
            accel_bias_walk=1e-3,
        )


@dataclass
class EpisodeConfig:
    duration_s: float = 20.0
    rate_hz: float = 500.0
    gait: GaitConfig = field(default_factory=GaitConfig)
    # (t_start, v_x, v_y, omega_z) in the heading frame; held until the next entry.
    command: list = field(default_factory=lambda: [(0.0, 0.5, 0.0, 0.0)])
    command_ramp_s: float = 1.0
    slip: SlipConfig = field(default_factory=SlipConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    contact_accuracy: float = 1.0
    seed: int = 0
    model: RobotModel = field(default_factory=RobotModel)

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_s * self.rate_hz))

    def validate(self) -> None:
        if not self.duration_s > 0:
            raise ConfigInvalid("duration_s", "must be > 0")
        if not self.rate_hz > 0:
            raise ConfigInvalid("rate_hz", "must be > 0")
        if not 0.0 < self.gait.duty_factor < 1.0:
            raise ConfigInvalid("gait.duty_factor", "must lie in (0, 1)")
        if not self.gait.step_freq > 0:
            raise ConfigInvalid("gait.step_freq", "must be > 0")
        if not 0.0 < self.contact_accuracy <= 1.0:
            raise ConfigInvalid("contact_accuracy", "must lie in (0, 1]")
        if not self.command:
            raise ConfigInvalid("command", "needs at least one segment")
        starts = [c[0] for c in self.command]
        if starts != sorted(starts):
            raise ConfigInvalid("command", "segment start times must be increasing")
        for s in self.slip.segments:
            if len(s) != 3 or s[1] <= s[0] or s[2] < 0:
                raise ConfigInvalid("slip.segments", f"bad segment {s!r}")
        if self.slip.direction not in ("backward", "random"):
            raise ConfigInvalid("slip.direction", "must be 'backward' or 'random'")
        for f in fields(NoiseConfig):
            if getattr(self.noise, f.name) < 0:
                raise ConfigInvalid(f"noise.{f.name}", "must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["command"] = [list(c) for c in self.command]
        d["slip"]["segments"] = [list(s) for s in self.slip.segments]
        d["slip"]["feet"] = list(self.slip.feet)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        slip = dict(d.pop("slip", {}))
        slip["segments"] = [tuple(s) for s in slip.get("segments", [])]
        slip["feet"] = tuple(slip.get("feet", (True,) * 4))
        return cls(
            gait=GaitConfig(**d.pop("gait", {})),
            command=[tuple(c) for c in d.pop("command", [(0.0, 0.5, 0.0, 0.0)])],
            slip=SlipConfig(**slip),
            noise=NoiseConfig(**d.pop("noise", {})),
            model=RobotModel.from_dict(d.pop("model")) if "model" in d else RobotModel(),
            **d,
        )

    def with_seed(self, seed: int) -> "EpisodeConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class SensorFrame:
    t: float
    gyro: np.ndarray
    accel: np.ndarray
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    contact_est: np.ndarray
    contact_gt: np.ndarray


@dataclass(frozen=True)
class GroundTruthState:
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    foot_pos_w: np.ndarray
    foot_vel_w: np.ndarray
    omega: np.ndarray


@dataclass
class Episode:
    """Struct-of-arrays episode; index ``k`` addresses frame ``k``."""

    config: EpisodeConfig
    t: np.ndarray  # (T,)
    gyro: np.ndarray  # (T, 3)
    accel: np.ndarray  # (T, 3)
    joint_pos: np.ndarray  # (T, 12)
    joint_vel: np.ndarray  # (T, 12)
    contact_est: np.ndarray  # (T, 4) bool
    contact_gt: np.ndarray  # (T, 4) bool
    R: np.ndarray  # (T, 3, 3)
    v: np.ndarray  # (T, 3)
    p: np.ndarray  # (T, 3)
    foot_pos_w: np.ndarray  # (T, 4, 3)
    foot_vel_w: np.ndarray  # (T, 4, 3)
    omega: np.ndarray  # (T, 3) true body angular rate

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.config.rate_hz

    def frame(self, k: int) -> SensorFrame:
        return SensorFrame(
            self.t[k], self.gyro[k], self.accel[k], self.joint_pos[k], self.joint_vel[k],
            self.contact_est[k], self.contact_gt[k],
        )

    def truth(self, k: int) -> GroundTruthState:
        return GroundTruthState(self.R[k], self.v[k], self.p[k], self.foot_pos_w[k], self.foot_vel_w[k], self.omega[k])

    @property
    def frames(self) -> list:
        return [self.frame(k) for k in range(len(self))]

    @property
    def truths(self) -> list:
        return [self.truth(k) for k in range(len(self))]


# ---------------------------------------------------------------------------
# base motion


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (10.0 + x * (-15.0 + 6.0 * x))


def _command(config: EpisodeConfig, t: np.ndarray) -> np.ndarray:
    """Smoothed (v_x, v_y, omega_z) at times ``t``; starts from rest."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (3,))
    prev = np.zeros(3)
    ramp = max(config.command_ramp_s, 1e-9)
    for start, *target in config.command:
        target = np.asarray(target, dtype=float)
        w = _smoothstep((t - start) / ramp)[..., None]
        out = np.where(t[..., None] >= start, prev + (target - prev) * w, out)
        prev = target
    return out


def _gait_active(config: EpisodeConfig) -> bool:
    return any(np.any(np.asarray(c[1:]) != 0.0) for c in config.command)


def _attitude(config: EpisodeConfig, t):
    """Body height, roll, pitch and their first derivatives."""
    g = config.gait
    on = 1.0 if _gait_active(config) else 0.0
    w1 = 2.0 * np.pi * g.step_freq
    w2 = 2.0 * w1
    z = g.body_height + on * g.bounce * np.sin(w2 * t)
    dz = on * g.bounce * w2 * np.cos(w2 * t)
    roll = on * g.roll_amp * np.sin(w1 * t)
    droll = on * g.roll_amp * w1 * np.cos(w1 * t)
    pitch = on * g.pitch_amp * np.sin(w2 * t + 0.5)
    dpitch = on * g.pitch_amp * w2 * np.cos(w2 * t + 0.5)
    return z, dz, roll, droll, pitch, dpitch


def _rot_zyx(yaw, pitch, roll) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def _integrate_planar(config: EpisodeConfig, t: np.ndarray):
    """RK4 on (yaw, x, y) driven by the smoothed command."""

    def deriv(tt, state):
        c = _command(config, np.array(tt))
        yaw = state[0]
        cy, sy = np.cos(yaw), np.sin(yaw)
        return np.array([c[2], cy * c[0] - sy * c[1], sy * c[0] + cy * c[1]])

    out = np.zeros((t.size, 3))
    state = np.zeros(3)
    for k in range(1, t.size):
        h = t[k] - t[k - 1]
        t0 = t[k - 1]
        k1 = deriv(t0, state)
        k2 = deriv(t0 + 0.5 * h, state + 0.5 * h * k1)
        k3 = deriv(t0 + 0.5 * h, state + 0.5 * h * k2)
        k4 = deriv(t0 + h, state + h * k3)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = state
    return out


def _base_trajectory(config: EpisodeConfig, t: np.ndarray):
    planar = _integrate_planar(config, t)
    yaw = planar[:, 0]
    cmd = _command(config, t)
    z, dz, roll, droll, pitch, dpitch = _attitude(config, t)
    R = _rot_zyx(yaw, pitch, roll)
    cy, sy = np.cos(yaw), np.sin(yaw)
    v = np.stack([cy * cmd[:, 0] - sy * cmd[:, 1], sy * cmd[:, 0] + cy * cmd[:, 1], dz], axis=-1)
    p = np.stack([planar[:, 1], planar[:, 2], z], axis=-1)
    dyaw = cmd[:, 2]
    # body rates from ZYX Euler rates
    omega = np.stack(
        [
            droll - dyaw * np.sin(pitch),
            dpitch * np.cos(roll) + dyaw * np.cos(pitch) * np.sin(roll),
            -dpitch * np.sin(roll) + dyaw * np.cos(pitch) * np.cos(roll),
        ],
        axis=-1,
    )
    return R, v, p, omega, yaw


# ---------------------------------------------------------------------------
# feet


def _slip_scale(config: EpisodeConfig, t: np.ndarray) -> np.ndarray:
    scale = np.zeros_like(t)
    ramp = max(config.slip.ramp_s, 1e-9)
    for t0, t1, s in config.slip.segments:
        env = np.minimum(_smoothstep((t - t0) / ramp), _smoothstep((t1 - t) / ramp))
        scale = np.maximum(scale, s * env * ((t >= t0) & (t <= t1)))
    return scale


def _slip_velocities(config: EpisodeConfig, t, v, scale, rng) -> np.ndarray:
    """Per-foot planar slip velocity, (T, 4, 3), heading smoothed by an OU process."""
    T = t.size
    dt = 1.0 / config.rate_hz
    sc = config.slip
    tau = max(sc.correlation_time, 1e-6)
    decay = np.exp(-dt / tau)
    noise = rng.standard_normal((T, 8))
    ou = np.zeros((T, 8))
    ou[0] = noise[0]
    for k in range(1, T):
        ou[k] = decay * ou[k - 1] + np.sqrt(1.0 - decay * decay) * noise[k]
    jitter = sc.heading_std * ou[:, :4]
    gain = np.exp(sc.magnitude_std * ou[:, 4:] - 0.5 * sc.magnitude_std**2)
    if sc.direction == "backward":
        motion = np.arctan2(v[:, 1], v[:, 0])
        base_heading = (motion + np.pi)[:, None]
    else:
        base_heading = rng.uniform(-np.pi, np.pi, size=(1, 4))
        jitter = jitter * (np.pi / max(sc.heading_std, 1e-9))
    heading = base_heading + jitter
    enabled = np.asarray(sc.feet, dtype=float)
    mag = scale[:, None] * enabled[None, :] * gain
    out = np.zeros((T, 4, 3))
    out[..., 0] = mag * np.cos(heading)
    out[..., 1] = mag * np.sin(heading)
    return out


def _feet(config: EpisodeConfig, t, R, p, yaw, slip_vel):
    """World foot positions/velocities and true contacts, each (T, 4, ...)."""
    g = config.gait
    model = config.model
    T = t.size
    dt = 1.0 / config.rate_hz
    period = 1.0 / g.step_freq
    t_stance = g.duty_factor * period
    t_swing = period - t_stance
    active = _gait_active(config)
    t_end = t[-1]

    def foothold(leg, cycle, offset):
        t_mid = (cycle - offset) * period + 0.5 * t_stance
        t_mid = min(max(t_mid, 0.0), t_end)
        k = t_mid / dt
        k0 = int(np.floor(k))
        k1 = min(k0 + 1, T - 1)
        a = k - k0
        base = (1 - a) * p[k0] + a * p[k1]
        psi = (1 - a) * yaw[k0] + a * yaw[k1]
        nom = model.nominal_foot(leg)
        c, s = np.cos(psi), np.sin(psi)
        return np.array([base[0] + c * nom[0] - s * nom[1], base[1] + s * nom[0] + c * nom[1], 0.0])

    pos = np.zeros((T, 4, 3))
    vel = np.zeros((T, 4, 3))
    contact = np.zeros((T, 4), dtype=bool)

    if not active:
        # standing: every foot planted under its hip
        for leg in range(4):
            pos[:, leg] = foothold(leg, 0, 0.0)
            vel[:, leg] = slip_vel[:, leg]
            for k in range(1, T):
                pos[k, leg] = pos[k - 1, leg] + 0.5 * dt * (slip_vel[k - 1, leg] + slip_vel[k, leg])
        contact[:] = True
        return pos, vel, contact

    for leg in range(4):
        off = TROT_OFFSETS[leg]
        cur = None
        last_cycle = None
        liftoff = None
        for k in range(T):
            phase_pos = t[k] / period + off
            cycle = int(np.floor(phase_pos))
            phase = phase_pos - cycle
            if phase < g.duty_factor:
                contact[k, leg] = True
                if last_cycle != cycle or cur is None:
                    cur = foothold(leg, cycle, off)
                    last_cycle = cycle
                else:
                    cur = cur + 0.5 * dt * (slip_vel[k - 1, leg] + slip_vel[k, leg])
                pos[k, leg] = cur
                vel[k, leg] = slip_vel[k, leg]
                liftoff = None
            else:
                if liftoff is None:
                    liftoff = cur if cur is not None else foothold(leg, cycle, off)
                target = foothold(leg, cycle + 1, off)
                s = (phase - g.duty_factor) / (1.0 - g.duty_factor)
                sig = s - np.sin(2.0 * np.pi * s) / (2.0 * np.pi)
                dsig = (1.0 - np.cos(2.0 * np.pi * s)) / t_swing
                lift = 0.5 * g.step_height * (1.0 - np.cos(2.0 * np.pi * s))
                dlift = 0.5 * g.step_height * 2.0 * np.pi * np.sin(2.0 * np.pi * s) / t_swing
                pos[k, leg] = liftoff + (target - liftoff) * sig + np.array([0.0, 0.0, lift])
                vel[k, leg] = (target - liftoff) * dsig + np.array([0.0, 0.0, dlift])
                cur = None
    return pos, vel, contact


# ---------------------------------------------------------------------------


def generate_episode(config: EpisodeConfig) -> Episode:
    """Simulate one episode; deterministic given ``config`` (including its seed)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    rng_slip, rng_noise, rng_contact = rng.spawn(3)
    T = config.num_frames
    dt = 1.0 / config.rate_hz
    t = np.arange(T + 1) * dt

    R, v, p, omega, yaw = _base_trajectory(config, t)
    scale = _slip_scale(config, t)
    slip_vel = _slip_velocities(config, t, v, scale, rng_slip)
    foot_pos, foot_vel, contact = _feet(config, t, R, p, yaw, slip_vel)

    # interval-average IMU
    dR = np.einsum("kji,kjl->kil", R[:-1], R[1:])
    gyro = np.array([log_so3(m) for m in dR]) / dt
    accel = np.einsum("kji,kj->ki", R[:-1], (v[1:] - v[:-1]) / dt - GRAVITY)

    R, v, p, omega = R[:-1], v[:-1], p[:-1], omega[:-1]
    foot_pos, foot_vel, contact, t = foot_pos[:-1], foot_vel[:-1], contact[:-1], t[:-1]

    model = config.model
    d_body = np.einsum("kji,kfj->kfi", R, foot_pos - p[:, None, :])
    rel_vel_w = foot_vel - v[:, None, :]
    d_dot = np.einsum("kji,kfj->kfi", R, rel_vel_w) - np.cross(omega[:, None, :], d_body)
    joint_pos = np.zeros((T, 4, 3))
    joint_vel = np.zeros((T, 4, 3))
    for leg in range(4):
        q = leg_inverse_kinematics(d_body[:, leg], leg, model)
        J = analytic_leg_jacobian(q, leg, model)
        joint_pos[:, leg] = q
        joint_vel[:, leg] = np.linalg.solve(J, d_dot[:, leg][..., None])[..., 0]

    nz = config.noise
    bias_g = np.cumsum(rng_noise.standard_normal((T, 3)) * nz.gyro_bias_walk * np.sqrt(dt), axis=0)
    bias_a = np.cumsum(rng_noise.standard_normal((T, 3)) * nz.accel_bias_walk * np.sqrt(dt), axis=0)
    gyro = gyro + bias_g + nz.gyro_std * rng_noise.standard_normal((T, 3))
    accel = accel + bias_a + nz.accel_std * rng_noise.standard_normal((T, 3))
    joint_pos = joint_pos.reshape(T, 12) + nz.joint_pos_std * rng_noise.standard_normal((T, 12))
    joint_vel = joint_vel.reshape(T, 12) + nz.joint_vel_std * rng_noise.standard_normal((T, 12))

    flips = rng_contact.random((T, 4)) < (1.0 - config.contact_accuracy)
    contact_est = contact ^ flips

    return Episode(
        config=config, t=t, gyro=gyro, accel=accel, joint_pos=joint_pos, joint_vel=joint_vel,
        contact_est=contact_est, contact_gt=contact.copy(), R=R, v=v, p=p,
        foot_pos_w=foot_pos, foot_vel_w=foot_vel, omega=omega,
    )


def strapdown(episode: Episode, start: int = 0, stop: int | None = None) -> tuple:
    """Dead-reckon the IMU stream from the true state at ``start`` (bias-free)."""
    stop = len(episode) if stop is None else stop
    dt = episode.dt
    R, v, p = episode.R[start].copy(), episode.v[start].copy(), episode.p[start].copy()
    out = [p.copy()]
    for k in range(start, stop - 1):
        a = R @ episode.accel[k] + GRAVITY
        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        R = R @ exp_so3(episode.gyro[k] * dt)
        out.append(p.copy())
    return np.array(out)
