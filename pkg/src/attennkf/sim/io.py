"""Episode files: one header record (config echo, model, schema) plus one record per frame."""

from __future__ import annotations

import numpy as np

from attennkf.records import read_records, write_records
from attennkf.sim.episode import Episode, EpisodeConfig

# fixed field order: SensorFrame fields then GroundTruthState fields
FIELDS = (
    "t", "gyro", "accel", "joint_pos", "joint_vel", "contact_est", "contact_gt",
    "R", "v", "p", "foot_pos_w", "foot_vel_w", "omega",
)


def save_episode(episode: Episode, path) -> None:
    header = {"kind": "episode", "config": episode.config.to_dict()}
    write_records(path, header, {name: getattr(episode, name) for name in FIELDS})


def load_episode(path) -> Episode:
    header, arrays = read_records(path)
    if header.get("kind") != "episode":
        raise ValueError(f"{path}: not an episode file")
    cfg = EpisodeConfig.from_dict(header["config"])
    return Episode(config=cfg, **{name: np.asarray(arrays[name]) for name in FIELDS})
