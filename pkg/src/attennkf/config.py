"""Pipeline configuration: INI sections mapped onto the module dataclasses.

Every key is optional; missing keys keep the defaults below. Unknown
sections or keys are errors so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from attennkf.compensator import VARIANTS, ClampConfig, TrainingConfig
from attennkf.filter import NoiseParams, SRConfig
from attennkf.sim.episode import EpisodeConfig, GaitConfig, NoiseConfig, SlipConfig
from attennkf.sim.scenario import ScenarioConfig
from attennkf.slipsig import SlipParams


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class PipelineSection:
    seed: int = 0
    n_train: int = 20
    n_test: int = 4
    train_seeds: tuple = (0, 1, 2)
    variants: tuple = VARIANTS
    deterministic: bool = True
    format: str = "bin"
    out_dir: str = "runs/default"


@dataclass
class EpisodeSection:
    rate_hz: float = 500.0
    command_ramp_s: float = 1.0


@dataclass
class InferenceSection:
    clamp: bool = True
    max_rot: float = 0.2
    max_pos: float = 0.2
    block: int = 32

    def clamp_config(self) -> ClampConfig:
        return ClampConfig(self.clamp, self.max_rot, self.max_pos)


@dataclass
class PipelineConfig:
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    gait: GaitConfig = field(default_factory=GaitConfig)
    slip: SlipConfig = field(default_factory=SlipConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig.default)
    filter: NoiseParams = field(default_factory=NoiseParams)
    sr: SRConfig = field(default_factory=SRConfig)
    slipsig: SlipParams = field(default_factory=SlipParams)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceSection = field(default_factory=InferenceSection)

    def base_episode(self) -> EpisodeConfig:
        return EpisodeConfig(
            rate_hz=self.episode.rate_hz,
            command_ramp_s=self.episode.command_ramp_s,
            gait=self.gait,
            slip=self.slip,
            noise=self.noise,
        )

    def validate(self) -> None:
        p = self.pipeline
        if p.n_train < 1 or p.n_test < 1:
            raise ConfigError("pipeline.n_train", "episode counts must be >= 1")
        if not p.train_seeds:
            raise ConfigError("pipeline.train_seeds", "need at least one training seed")
        for v in p.variants:
            if v not in VARIANTS:
                raise ConfigError("pipeline.variants", f"unknown variant {v!r}")
        if p.format not in ("bin", "jsonl"):
            raise ConfigError("pipeline.format", "must be 'bin' or 'jsonl'")
        if self.inference.block < 1:
            raise ConfigError("inference.block", "must be >= 1")
        try:
            self.base_episode().validate()
            self.training.validate()
        except ValueError as exc:
            name = getattr(exc, "field", None) or "training"
            raise ConfigError(name, str(exc).removeprefix(f"{name}: ")) from exc

    def to_dict(self) -> dict:
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}


def _parse(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], bool):
                return tuple(_parse(s, True, name) for s in items)
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {type(default).__name__}") from None


def _apply(section, items: dict, prefix: str):
    known = {f.name for f in fields(section)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
        if prefix == "slip" and key == "segments":
            raise ConfigError("slip.segments", "segments come from the scenario settings")
        updates[key] = _parse(raw, getattr(section, key), f"{prefix}.{key}")
    try:
        return replace(section, **updates)
    except ValueError as exc:
        raise ConfigError(prefix, str(exc)) from exc


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Read an INI file (or INI text); the result is validated."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    if text is not None:
        cp.read_string(text)
    cfg = PipelineConfig()
    names = {f.name for f in fields(cfg)}
    updates = {}
    for sec in cp.sections():
        if sec not in names:
            raise ConfigError(sec, "unknown section")
        updates[sec] = _apply(getattr(cfg, sec), dict(cp.items(sec)), sec)
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    out = []
    for sec, values in cfg.to_dict().items():
        out.append(f"[{sec}]")
        for k, v in values.items():
            if sec == "slip" and k == "segments":
                continue
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)


def _digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def config_hash(cfg: PipelineConfig) -> str:
    """Hash of everything that can change a result (output location excluded)."""
    d = cfg.to_dict()
    d["pipeline"].pop("out_dir")
    return _digest(d)


def model_hash(cfg: PipelineConfig) -> str:
    """Hash of the settings a checkpoint depends on (data, filter, training)."""
    d = cfg.to_dict()
    for key in ("out_dir", "variants", "train_seeds", "n_test", "format", "deterministic"):
        d["pipeline"].pop(key)
    d.pop("inference")
    return _digest(d)
