"""Plain-text run configuration: key=value pairs under [section] headers.

Unknown sections or keys are rejected outright so experiments stay auditable
from a single file. CLI flags override file values.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .models import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    regime: str = "regular"
    train_count: int = 2000
    test_count: int = 200
    u_min: int = 3
    u_max: int = 8
    seed: int = 0
    noise_fraction: float = 0.0
    snr_db: float = 10.0
    d_feat: int = 16


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


class ConfigError(ValueError):
    pass


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _coerce(field_obj, raw):
    t = field_obj.type
    if t in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"invalid boolean {raw!r} for key {field_obj.name}")
    if t in (int, "int"):
        return int(raw)
    if t in (float, "float"):
        return float(raw)
    return raw


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Build a RunConfig from an optional file plus 'section.key=value'
    override strings."""
    values = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            fields = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
            for key, raw in parser.items(section):
                if key not in fields:
                    raise ConfigError(
                        f"unknown key {key!r} in section [{section}]")
                values[section][key] = _coerce(fields[key], raw)
    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(
                f"override must look like section.key=value, got {ov!r}")
        dotted, raw = ov.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        fields = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        values[section][key] = _coerce(fields[key], raw)
    try:
        return RunConfig(model=ModelConfig(**values["model"]),
                         train=TrainConfig(**values["train"]),
                         data=DataConfig(**values["data"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
