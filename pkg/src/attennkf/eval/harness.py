"""Estimator comparison grid, throughput benchmark, and report/plot exports."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass

import numpy as np

from attennkf.eval.metrics import REReport, segment_by_distance, segment_errors, summarize
from attennkf.lie import log_so3

# row order of the ablation grid
BASELINES = ("InEKF", "SR")


@dataclass
class MatrixResult:
    rows: dict  # estimator -> REReport pooled over episodes and seeds
    per_seed: dict  # estimator -> [REReport per seed]

    def mean_re_pos(self, name: str) -> float:
        """Average over seeds of each seed's mean RE_pos."""
        return float(np.mean([r.re_pos[0] for r in self.per_seed[name]]))


def episode_segments(episode) -> np.ndarray:
    return segment_by_distance(episode.p)


def run_matrix(episodes, estimators: dict) -> MatrixResult:
    """Evaluate every estimator on every episode.

    ``estimators`` maps a row name to a list of callables, one per seed; each
    callable takes ``(index, episode)`` and returns an ``(R, v, p)``
    trajectory aligned with the episode.
    """
    segs = [episode_segments(ep) for ep in episodes]
    rows, per_seed = {}, {}
    for name, runs in estimators.items():
        pooled = []
        seeds = []
        for run in runs:
            errs = [segment_errors(run(i, ep), (ep.R, ep.v, ep.p), s) for i, (ep, s) in enumerate(zip(episodes, segs))]
            errs = np.vstack(errs)
            seeds.append(summarize(errs))
            pooled.append(errs)
        rows[name] = summarize(np.vstack(pooled))
        per_seed[name] = seeds
    return MatrixResult(rows, per_seed)


def format_cell(stat: tuple, digits: int = 3) -> str:
    return f"{stat[0]:.{digits}f} ({stat[1]:.{digits}f})"


def write_table_csv(path, rows: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "re_rot_mean", "re_rot_std", "re_vel_mean", "re_vel_std", "re_pos_mean", "re_pos_std", "segments"])
        for name, r in rows.items():
            w.writerow([name, *(repr(float(x)) for x in (*r.re_rot, *r.re_vel, *r.re_pos)), r.segments])


def write_table_json(path, rows: dict, extra: dict | None = None) -> None:
    doc = {"rows": {name: r.as_dict() for name, r in rows.items()}}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def format_table(rows: dict) -> str:
    """Text grid in mean (std) layout: RE_rot [deg], RE_vel [m/s], RE_pos [m]."""
    width = max([len(n) for n in rows] + [9])
    lines = [f"{'estimator':<{width}}  {'RE_rot':>16}  {'RE_vel':>16}  {'RE_pos':>16}"]
    for name, r in rows.items():
        lines.append(f"{name:<{width}}  {format_cell(r.re_rot):>16}  {format_cell(r.re_vel):>16}  {format_cell(r.re_pos):>16}")
    return "\n".join(lines)


def load_table_json(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for name, d in doc["rows"].items():
        out[name] = REReport(
            (d["re_rot_mean"], d["re_rot_std"]), (d["re_vel_mean"], d["re_vel_std"]),
            (d["re_pos_mean"], d["re_pos_std"]), d["segments"],
        )
    return out


# ---------------------------------------------------------------------------


@dataclass
class Throughput:
    steps: int
    steps_per_s: float
    mean_ms: float
    p50_ms: float
    p99_ms: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def benchmark_throughput(run, episode, repeats: int = 1) -> Throughput:
    """Time ``run(episode, on_tick)``, which must call ``on_tick()`` once per frame.

    Per-step latency is the wall time between consecutive ticks, so a frame
    that also flushes a compensation block carries that block's cost.
    """
    stamps = []

    def tick():
        stamps.append(time.perf_counter())

    total = 0.0
    lat = []
    for _ in range(repeats):
        stamps.clear()
        t0 = time.perf_counter()
        run(episode, tick)
        total += time.perf_counter() - t0
        lat.append(np.diff(np.concatenate([[t0], stamps])))
    lat = np.concatenate(lat) * 1e3
    n = lat.size
    return Throughput(n, n / total, float(lat.mean()), float(np.percentile(lat, 50)), float(np.percentile(lat, 99)))


# ---------------------------------------------------------------------------


def write_plot_data(path, episode, trajectories: dict, slip: np.ndarray) -> None:
    """Per-frame CSV: time, ground truth, each estimate (position and yaw), max slip level."""
    names = list(trajectories)

    def yaw(R):
        return np.arctan2(R[:, 1, 0], R[:, 0, 0])

    cols = ["t", "gt_x", "gt_y", "gt_z", "gt_yaw"]
    data = [episode.t, *episode.p.T, yaw(episode.R)]
    for n in names:
        R, _, p = trajectories[n]
        cols += [f"{n}_x", f"{n}_y", f"{n}_z", f"{n}_yaw"]
        data += [*np.asarray(p).T, yaw(np.asarray(R))]
    cols.append("slip_max")
    data.append(np.asarray(slip).max(axis=1))
    table = np.column_stack(data)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([repr(float(x)) for x in row])


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray) -> np.ndarray:
    return np.degrees([np.linalg.norm(log_so3(g @ e.T)) for e, g in zip(R_est, R_gt)])
