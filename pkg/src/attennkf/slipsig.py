"""Continuous foot-slip level and its correlation with filter error."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from attennkf.lie import log_so3

BIN_WIDTH = 0.2


class DegenerateInput(ValueError):
    pass


@dataclass(frozen=True)
class SlipParams:
    k: float = 50.0  # sigmoid steepness, s/m
    v_th: float = 0.1  # m/s

    def __post_init__(self):
        if not self.k > 0 or self.v_th < 0:
            raise ValueError("slip params need k > 0 and v_th >= 0")


def slip_level(foot_vel_w, contact: bool, params: SlipParams = SlipParams()) -> float:
    if not contact:
        return 0.0
    speed = float(np.linalg.norm(foot_vel_w))
    return float(0.5 * (1.0 + np.tanh(0.5 * params.k * (speed - params.v_th))))


def slip_levels(foot_vel_w: np.ndarray, contact: np.ndarray, params: SlipParams = SlipParams()) -> np.ndarray:
    """Vectorized slip level over trailing (…, 4, 3) velocities and (…, 4) contacts."""
    speed = np.linalg.norm(foot_vel_w, axis=-1)
    lv = 0.5 * (1.0 + np.tanh(0.5 * params.k * (speed - params.v_th)))
    return np.where(np.asarray(contact, dtype=bool), lv, 0.0)


def state_error_norms(R_est, v_est, p_est, R_gt, v_gt, p_gt) -> tuple:
    e_rot = float(np.linalg.norm(log_so3(np.asarray(R_gt) @ np.asarray(R_est).T)))
    e_vel = float(np.linalg.norm(np.asarray(v_gt) - np.asarray(v_est)))
    e_pos = float(np.linalg.norm(np.asarray(p_gt) - np.asarray(p_est)))
    return e_rot, e_vel, e_pos


@dataclass
class CorrelationReport:
    pearson_r: float
    bin_edges: np.ndarray
    bin_means: np.ndarray
    bin_stds: np.ndarray
    bin_counts: np.ndarray
    p95: np.ndarray  # (rot rad, vel m/s, pos m)

    def nondecreasing_bins(self) -> int:
        """Count of populated bins whose mean is >= the previous populated bin (first counts)."""
        means = [m for m, c in zip(self.bin_means, self.bin_counts) if c > 0]
        if not means:
            return 0
        return 1 + sum(b >= a for a, b in zip(means, means[1:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slip_bin_lo", "slip_bin_hi", "mean", "std", "count"])
            for lo, hi, m, s, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.bin_means, self.bin_stds, self.bin_counts):
                w.writerow([f"{lo:.1f}", f"{hi:.1f}", repr(float(m)), repr(float(s)), int(c)])
            w.writerow(["pearson_r", "", repr(float(self.pearson_r)), "", int(self.bin_counts.sum())])


def correlation_report(errors, slip) -> CorrelationReport:
    """Normalize each error channel by its 95th percentile and correlate the combined error with slip.

    ``errors`` is (T, 3) of (rot, vel, pos); ``slip`` is the per-frame scalar slip level.
    """
    errors = np.asarray(errors, dtype=float)
    slip = np.asarray(slip, dtype=float)
    if errors.ndim != 2 or errors.shape[1] != 3 or errors.shape[0] != slip.shape[0]:
        raise ValueError("errors must be (T, 3) and match slip length")
    if slip.shape[0] < 100:
        raise ValueError("need at least 100 samples")
    if np.var(slip) == 0.0:
        raise DegenerateInput("slip level has zero variance")

    p95 = np.percentile(errors, 95, axis=0, method="linear")
    scaled = errors / np.where(p95 > 0, p95, 1.0)
    scalar = np.sqrt(np.sum(scaled * scaled, axis=1))
    if np.var(scalar) == 0.0:
        raise DegenerateInput("state error has zero variance")
    r = float(np.corrcoef(scalar, slip)[0, 1])

    edges = np.round(np.arange(0.0, 1.0 + 1e-9, BIN_WIDTH), 10)
    idx = np.clip(np.floor(slip / BIN_WIDTH).astype(int), 0, len(edges) - 2)
    means = np.full(len(edges) - 1, np.nan)
    stds = np.full(len(edges) - 1, np.nan)
    counts = np.zeros(len(edges) - 1, dtype=int)
    for b in range(len(edges) - 1):
        sel = scalar[idx == b]
        counts[b] = sel.size
        if sel.size:
            means[b] = sel.mean()
            stds[b] = sel.std()
    return CorrelationReport(r, edges, means, stds, counts, p95)
