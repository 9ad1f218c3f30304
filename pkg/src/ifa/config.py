"""Flat ``key = value`` config files with one section per concern.

    [data]
    num_requests = 2000
    n = 1024

    [model]
    kernel = relu_eps
    hidden = 64, 32

    [train]
    lr = 0.003

Sections map onto :class:`GenConfig`, :class:`ModelConfig` and
:class:`TrainConfig`; keys are the dataclass field names.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .data import GenConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"data": GenConfig, "model": ModelConfig, "train": TrainConfig}


def _convert(raw: str, default, key: str):
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
            items = [x.strip() for x in raw.split(",") if x.strip()]
            cast = float if default and isinstance(default[0], float) else int
            return tuple(cast(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def read_config(path) -> dict:
    """Parse a config file into ``{section: {key: raw string}}``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return {name: dict(parser[name]) for name in parser.sections()}


def build(section: str, raw: dict | None = None, **overrides):
    """Instantiate the dataclass for ``section`` from raw strings plus typed overrides."""
    cls = SECTIONS[section]
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in (raw or {}).items():
        if key not in defaults:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _convert(value, defaults[key], f"[{section}] {key}")
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def model_config_for(gen: GenConfig, raw: dict | None = None, **overrides) -> ModelConfig:
    """Model config whose vocabularies follow the generator unless set explicitly."""
    raw = dict(raw or {})
    for key in ("user_vocab", "item_vocab", "cross_vocab"):
        if key not in raw and key not in overrides:
            overrides[key] = getattr(gen, key)
    return build("model", raw, **overrides)


def dump_section(name: str, obj) -> str:
    lines = [f"[{name}]"]
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_model_config(path, cfg: ModelConfig):
    Path(path).write_text(dump_section("model", cfg))
