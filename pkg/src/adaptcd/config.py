"""Run configuration: JSON file + dotted ``section.key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .peft import PeftConfig
from .train import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    backbone: str = ""  # optional backbone WeightFile


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        try:
            self.vit.validate()
            self.peft.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# Desk-scale settings used by the synthetic acceptance run.
PRESETS = {
    "vit-s": {},
    "tiny": {
        "vit": {"image_size": 64, "patch_size": 8, "depth": 2, "dim": 32, "heads": 2},
        "train": {"batch_size": 8, "epochs": 30, "lr": 4e-3},
    },
}


def _coerce(current, raw):
    if isinstance(raw, str):
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"not a boolean: {raw!r}")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, (list, tuple)):
            raw = raw.strip()
            if raw.startswith("["):
                return json.loads(raw)
            return [x for x in raw.split(",") if x]
    return raw


def apply_overrides(cfg: RunConfig, overrides):
    """Apply a mapping of ``"section.key" -> value`` in place."""
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        target = getattr(cfg, section, None)
        if target is None or not key or key not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            setattr(target, key, _coerce(getattr(target, key), raw))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {dotted}: {raw!r}") from e
    return cfg


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def from_dict(d):
    return apply_overrides(RunConfig(), dict(_flatten(d)))


def load(path=None, preset=None, overrides=None):
    """defaults < preset < config file < overrides."""
    cfg = RunConfig()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        apply_overrides(cfg, dict(_flatten(PRESETS[preset])))
    if path:
        with open(path) as f:
            apply_overrides(cfg, dict(_flatten(json.load(f))))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()
