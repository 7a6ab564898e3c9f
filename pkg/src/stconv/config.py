"""Flat ``key=value`` config files covering model and training settings.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}", key) from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})", key)
        if key in out:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})", key)
        out[key] = raw
    return out


def resolve(raw: dict, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Build configs with precedence override > file value > default."""
    merged = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = str(v)
    model_kw, train_kw = {}, {}
    defaults_m, defaults_t = ModelConfig(), TrainConfig()
    for key, value in merged.items():
        if key in _MODEL_FIELDS:
            model_kw[key] = _coerce(key, value, getattr(defaults_m, key))
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _coerce(key, value, getattr(defaults_t, key))
        else:
            raise ConfigError(f"unknown config key {key!r}", key)
    try:
        model = ModelConfig(**model_kw)
    except ValueError as exc:
        raise ConfigError(f"model config: {exc}", _guess_key(str(exc), model_kw)) from None
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(f"train config: {exc}", _guess_key(str(exc), train_kw)) from None
    return model, train


def _guess_key(message: str, kw: dict):
    for k in kw:
        if k in message:
            return k
    return None


def load_config(path, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    text = Path(path).read_text(encoding="utf-8")
    return resolve(parse_config_text(text), overrides)


def train_config_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(model: ModelConfig, extra: dict | None = None) -> str:
    lines = [f"{k}={v}" for k, v in dataclasses.asdict(model).items()]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    return "\n".join(lines) + "\n"
