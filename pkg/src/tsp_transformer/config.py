"""Strict ``key = value`` training configuration files."""
from __future__ import annotations

import logging
from dataclasses import fields

from .training import TrainConfig

log = logging.getLogger(__name__)

# file key -> TrainConfig field
KEYS = {
    "n": "n",
    "batch_size": "batch_size",
    "steps_per_epoch": "steps_per_epoch",
    "epochs": "epochs",
    "lr": "learning_rate",
    "learning_rate": "learning_rate",
    "d": "d",
    "h": "heads",
    "L_enc": "enc_layers",
    "L_dec": "dec_layers",
    "d_ff": "d_ff",
    "C": "clip",
    "baseline_eval_size": "baseline_eval_size",
    "seed": "seed",
    "optimizer": "optimizer",
    "grad_clip": "grad_clip",
    "dtype": "dtype",
}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    defaults = TrainConfig()
    values: dict = {}
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {num}: expected 'key = value', found {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {num}: unknown config key {key!r}; known keys: {', '.join(sorted(KEYS))}")
        name = KEYS[key]
        if name in values:
            raise ConfigError(f"line {num}: {key!r} set more than once")
        kind = types[name]
        try:
            values[name] = int(value) if kind in (int, "int") else float(value) if kind in (float, "float") else value
        except ValueError:
            raise ConfigError(f"line {num}: {key} expects a {kind} value, got {value!r}") from None
    for key, name in KEYS.items():
        if name not in values and key != "learning_rate":
            log.warning("config key %r missing; using default %r", key, getattr(defaults, name))
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def format_config(config: TrainConfig) -> str:
    inverse = {name: key for key, name in KEYS.items() if key != "learning_rate"}
    return "".join(f"{inverse[f.name]} = {getattr(config, f.name)}\n" for f in fields(TrainConfig))
