"""Relative errors over fixed traveled-distance segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attennkf.lie import log_so3


class TooShort(ValueError):
    pass


class Misaligned(ValueError):
    pass


@dataclass
class REReport:
    """Mean and population std of per-segment errors (deg, m/s, m)."""

    re_rot: tuple
    re_vel: tuple
    re_pos: tuple
    segments: int

    def as_dict(self) -> dict:
        return {
            "re_rot_mean": self.re_rot[0], "re_rot_std": self.re_rot[1],
            "re_vel_mean": self.re_vel[0], "re_vel_std": self.re_vel[1],
            "re_pos_mean": self.re_pos[0], "re_pos_std": self.re_pos[1],
            "segments": self.segments,
        }


def segment_by_distance(p_gt: np.ndarray, stride_m: float = 5.0, overlap: float = 0.5) -> list:
    """Frame-index pairs ``(start, end)`` spanning ``stride_m`` of ground-truth path.

    Starts are placed where the cumulative path length crosses multiples of
    ``stride_m * (1 - overlap)``.
    """
    p_gt = np.asarray(p_gt, dtype=float)
    steps = np.linalg.norm(np.diff(p_gt, axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    if dist[-1] < stride_m:
        raise TooShort(f"trajectory covers {dist[-1]:.3f} m < {stride_m} m")
    hop = stride_m * (1.0 - overlap)
    out = []
    j = 0
    while j * hop + stride_m <= dist[-1]:
        s = int(np.searchsorted(dist, j * hop, side="left"))
        e = int(np.searchsorted(dist, j * hop + stride_m, side="left"))
        out.append((s, e))
        j += 1
    return out


def _check(est, gt):
    if len(est[0]) != len(gt[0]):
        raise Misaligned(f"estimate has {len(est[0])} frames, ground truth {len(gt[0])}")


def segment_errors(est: tuple, gt: tuple, segments: list) -> np.ndarray:
    """Per-segment (rot deg, vel m/s, pos m); ``est``/``gt`` are (R, v, p) arrays."""
    _check(est, gt)
    R_e, v_e, p_e = est
    R_g, v_g, p_g = gt
    out = np.empty((len(segments), 3))
    for n, (s, e) in enumerate(segments):
        d_gt = R_g[s].T @ R_g[e]
        d_est = R_e[s].T @ R_e[e]
        rot = np.degrees(np.linalg.norm(log_so3(d_gt @ d_est.T)))
        pos = np.linalg.norm(R_g[s].T @ (p_g[e] - p_g[s]) - R_e[s].T @ (p_e[e] - p_e[s]))
        vel = np.mean(np.linalg.norm(v_g[s : e + 1] - v_e[s : e + 1], axis=1))
        out[n] = rot, vel, pos
    return out


def summarize(per_segment: np.ndarray) -> REReport:
    per_segment = np.asarray(per_segment, dtype=float).reshape(-1, 3)
    if per_segment.shape[0] == 0:
        raise TooShort("no segments")
    mean = per_segment.mean(axis=0)
    std = per_segment.std(axis=0)
    return REReport(
        (float(mean[0]), float(std[0])), (float(mean[1]), float(std[1])), (float(mean[2]), float(std[2])),
        int(per_segment.shape[0]),
    )


def relative_errors(est: tuple, gt: tuple, segments: list) -> REReport:
    return summarize(segment_errors(est, gt, segments))
