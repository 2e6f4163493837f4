"""Run the filter over an episode and keep a per-frame trace.

A trace row holds the posterior base state, the internal correction, the
covariance diagonal, foot activity, and the slip signals computed from the
estimated state (the same signals a deployed compensator would see).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attennkf import filter as F
from attennkf.lie import exp_so3
from attennkf.records import read_records, write_records
from attennkf.sim.episode import Episode
from attennkf.slipsig import SlipParams, slip_levels

ESTIMATORS = ("inekf", "sr")


@dataclass
class FilterTrace:
    t: np.ndarray  # (T,)
    xbar: np.ndarray  # (T, 9) posterior [log R, v, p]
    dx: np.ndarray  # (T, 9) internal correction
    P_diag: np.ndarray  # (T, 27)
    active: np.ndarray  # (T, 4) bool
    slip: np.ndarray  # (T, 4) slip level from the estimated state
    foot_speed: np.ndarray  # (T, 4) estimated stance-foot speed, m/s
    R: np.ndarray  # (T, 3, 3) posterior rotation
    xcomp: np.ndarray | None = None  # (T, 9) compensated base state
    R_comp: np.ndarray | None = None

    def __len__(self) -> int:
        return self.t.shape[0]

    def trajectory(self) -> tuple:
        return self.R, self.xbar[:, 3:6], self.xbar[:, 6:9]

    def compensated(self) -> tuple:
        if self.xcomp is None:
            raise ValueError("trace has no compensated stream")
        return self.R_comp, self.xcomp[:, 3:6], self.xcomp[:, 6:9]

    def arrays(self) -> dict:
        out = {
            "t": self.t, "xbar": self.xbar, "dx": self.dx, "P_diag": self.P_diag,
            "active": self.active, "slip": self.slip, "foot_speed": self.foot_speed,
            "R": self.R.reshape(-1, 9),
        }
        if self.xcomp is not None:
            out["xcomp"] = self.xcomp
            out["R_comp"] = self.R_comp.reshape(-1, 9)
        return out


def save_trace(trace: FilterTrace, path, header: dict | None = None) -> None:
    write_records(path, {"kind": "trace", **(header or {})}, trace.arrays())


def load_trace(path) -> tuple:
    header, a = read_records(path)
    if header.get("kind") != "trace":
        raise ValueError(f"{path}: not a trace file")
    trace = FilterTrace(
        t=a["t"], xbar=a["xbar"], dx=a["dx"], P_diag=a["P_diag"], active=a["active"],
        slip=a["slip"], foot_speed=a["foot_speed"], R=a["R"].reshape(-1, 3, 3),
        xcomp=a.get("xcomp"), R_comp=a["R_comp"].reshape(-1, 3, 3) if "R_comp" in a else None,
    )
    return header, trace


def run_filter(
    episode: Episode,
    noise: F.NoiseParams = F.NoiseParams(),
    estimator: str = "inekf",
    sr: F.SRConfig = F.SRConfig(),
    slip_params: SlipParams = SlipParams(),
    on_frame=None,
) -> FilterTrace:
    """Predict/update over every frame, starting from the true initial state.

    Slip levels for frame ``k`` come from the prior at ``k`` (after predict,
    before update), which is what the SR update consumes. ``on_frame(k, trace)``
    is called after row ``k`` is written; it must not modify the trace.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    T = len(episode)
    model = episode.config.model
    dt = episode.dt
    tr = FilterTrace(
        t=episode.t.copy(), xbar=np.empty((T, 9)), dx=np.empty((T, 9)), P_diag=np.empty((T, F.DIM)),
        active=np.empty((T, 4), dtype=bool), slip=np.empty((T, 4)), foot_speed=np.empty((T, 4)),
        R=np.empty((T, 3, 3)),
    )
    st = F.init(episode.R[0], episode.v[0], episode.p[0], noise)
    for k in range(T):
        if k > 0:
            st = F.predict(st, episode.gyro[k - 1], episode.accel[k - 1], dt, noise)
        contact = episode.contact_est[k]
        fv = F.estimated_foot_velocities(st, episode.gyro[k], episode.joint_pos[k], episode.joint_vel[k], model)
        lv = slip_levels(fv, contact, slip_params)
        if estimator == "sr":
            st, dx = F.update_contact_sr(st, episode.joint_pos[k], episode.joint_vel[k], contact, model, noise, lv, sr)
        else:
            st, dx = F.update_contact(st, episode.joint_pos[k], episode.joint_vel[k], contact, model, noise)
        tr.xbar[k] = F.extract_base_state(st)
        tr.dx[k] = dx
        tr.P_diag[k] = np.diag(st.P)
        tr.active[k] = st.active
        tr.slip[k] = lv
        tr.foot_speed[k] = np.where(contact, np.linalg.norm(fv, axis=1), 0.0)
        tr.R[k] = st.R
        if on_frame is not None:
            on_frame(k, tr)
    return tr


def rotations(theta: np.ndarray) -> np.ndarray:
    return np.array([exp_so3(th) for th in np.asarray(theta).reshape(-1, 3)])
