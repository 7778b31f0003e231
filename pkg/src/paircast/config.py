"""Run configuration: a strict JSON mirror of the experiment knobs.

Unknown keys anywhere in the file are rejected so typos cannot pass
silently. All sections have complete defaults; an empty JSON object is
a valid configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError, ParseError
from .model import ModelConfig
from .scenedata import SynthConfig

HORIZON_STEPS = {3.0: 15, 5.0: 25}


@dataclass
class TrainingConfig:
    lr: float = 3e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    wta: bool = True
    mode_ce_weight: float = 0.1
    # draw a fresh ego per scene each epoch, so the pair covariance
    # head sees every agent role instead of only the designated ego
    ego_sampling: bool = False

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode_ce_weight < 0.0:
            raise ConfigError(f"mode_ce_weight must be >= 0, got {self.mode_ce_weight}")


@dataclass
class RunConfig:
    data_dir: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    horizons: list = field(default_factory=lambda: [3.0])
    n_frames: int = 240
    window_stride: int = 1
    val_fraction: float = 0.25
    attach_radius: float = 5.0

    def __post_init__(self):
        if not self.horizons:
            raise ConfigError("horizons must not be empty")
        for h in self.horizons:
            if float(h) not in HORIZON_STEPS:
                raise ConfigError(
                    f"horizon {h} unsupported; valid: {sorted(HORIZON_STEPS)}")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.window_stride < 1:
            raise ConfigError("window_stride must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.attach_radius <= 0.0:
            raise ConfigError("attach_radius must be > 0")


def _section(raw: dict, key: str, cls, source: str):
    sub = raw.pop(key, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{source}: section {key!r} must be an object")
    allowed = set(cls.__dataclass_fields__)
    unknown = set(sub) - allowed
    if unknown:
        raise ConfigError(f"{source}: unknown keys in {key!r}: {sorted(unknown)}")
    return cls(**sub)


def run_config_from_dict(raw: dict, source: str = "<config>") -> RunConfig:
    raw = dict(raw)
    synth = _section(raw, "synth", SynthConfig, source)
    model = _section(raw, "model", ModelConfig, source)
    training = _section(raw, "training", TrainingConfig, source)
    allowed = set(RunConfig.__dataclass_fields__) - {"synth", "model", "training"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{source}: unknown keys: {sorted(unknown)}")
    return RunConfig(synth=synth, model=model, training=training, **raw)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return run_config_from_dict(raw, source=str(path))
