"""Randomized episode configs for desk-scale datasets.

A slip episode stands for a uniformly slippery terrain patch: slip is active
for the whole run with a per-episode scale. Non-slip episodes share the same
command randomization so the two populations differ only in the terrain.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from attennkf.sim.episode import EpisodeConfig, NoiseConfig


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float = 20.0
    change_every_s: float = 5.0
    speed: tuple = (0.3, 0.7)
    lateral: float = 0.1
    yaw_rate: float = 0.3
    slip_scale: tuple = (0.05, 0.15)
    slip_fraction: float = 0.5
    contact_accuracy: float = 0.97


def random_command(rng: np.random.Generator, sc: ScenarioConfig) -> list:
    """Forward walk with a fresh (v_x, v_y, omega_z) every ``change_every_s``."""
    cmd = [(0.0, float(rng.uniform(*sc.speed)), 0.0, 0.0)]
    t = sc.change_every_s
    while t < sc.duration_s:
        cmd.append(
            (
                t,
                float(rng.uniform(*sc.speed)),
                float(rng.uniform(-sc.lateral, sc.lateral)),
                float(rng.uniform(-sc.yaw_rate, sc.yaw_rate)),
            )
        )
        t += sc.change_every_s
    return cmd


def scenario_episode(seed: int, slip: bool, sc: ScenarioConfig = ScenarioConfig(), base: EpisodeConfig | None = None) -> EpisodeConfig:
    """Config for one randomized episode; the command/slip draw is keyed on ``seed``."""
    base = base or EpisodeConfig(noise=NoiseConfig.default())
    rng = np.random.default_rng([seed, 7919])
    cmd = random_command(rng, sc)
    scale = float(rng.uniform(*sc.slip_scale))
    segments = [(0.0, sc.duration_s, scale)] if slip else []
    return replace(
        base,
        duration_s=sc.duration_s,
        command=cmd,
        slip=replace(base.slip, segments=segments),
        contact_accuracy=sc.contact_accuracy,
        seed=seed,
    )


def dataset_configs(n: int, seed: int, sc: ScenarioConfig = ScenarioConfig(), base: EpisodeConfig | None = None) -> list:
    """``n`` episodes with seeds ``seed + i``; slip episodes are spread evenly at ``slip_fraction``."""
    f = sc.slip_fraction
    return [
        scenario_episode(seed + i, bool(np.floor((i + 1) * f) > np.floor(i * f)), sc, base)
        for i in range(n)
    ]


def slip_episodes(n: int, seed: int, sc: ScenarioConfig = ScenarioConfig(), base: EpisodeConfig | None = None) -> list:
    return [scenario_episode(seed + i, True, sc, base) for i in range(n)]


def clean_episodes(n: int, seed: int, sc: ScenarioConfig = ScenarioConfig(), base: EpisodeConfig | None = None) -> list:
    return [scenario_episode(seed + i, False, sc, base) for i in range(n)]
