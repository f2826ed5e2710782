"""Run configuration: dataclass of every hyperparameter, resolved from a flat
``key = value`` file, the SPDET_SEED environment variable, then explicit
flags (later sources win). Unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .errors import ConfigError

SEED_ENV_VAR = "SPDET_SEED"


@dataclass
class Config:
    seed: int = 7
    n_classes: int = 4
    image_size: int = 64

    # model dims
    d_h: int = 32
    d_l: int = 16
    d_shared: int = 32
    d_t: int = 32
    heads: int = 4
    depth: int = 2
    scp_heads: int = 2
    stub_c1: int = 8
    stub_c2: int = 16
    dfl_bins: int = 8
    max_len: int = 64

    # objectives and matching
    temperature: float = 0.1
    temperature_learnable: bool = False
    fusion_order: str = "scp_first"
    use_negative_prompts: bool = True
    match_threshold: float = 0.6
    nms_iou: float = 0.5
    nms_score: float = 0.25

    # optimization
    lr: float = 1.5e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 40
    patience: int = 20
    val_fraction: float = 0.1

    def validate(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.d_h % self.heads or self.d_shared % self.heads:
            raise ConfigError("heads must divide d_h and d_shared")
        if self.d_t % self.scp_heads:
            raise ConfigError("scp_heads must divide d_t")
        if self.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")
        if not 0 < self.match_threshold <= 1:
            raise ConfigError("match_threshold must be in (0, 1]")
        for name in ("nms_iou", "nms_score"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.dfl_bins < 2:
            raise ConfigError("dfl_bins must be >= 2")
        if not 2 <= self.n_classes <= 14:
            raise ConfigError("n_classes must be in [2, 14]")
        if self.fusion_order not in ("scp_first", "dbp_first"):
            raise ConfigError(f"unknown fusion_order {self.fusion_order!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size/epochs/patience out of range")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        return self

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}" if isinstance(value, str) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @property
    def grid_high(self):
        return self.image_size // 16

    @property
    def grid_low(self):
        return self.image_size // 8


_FIELDS = {f.name: f.type for f in dataclasses.fields(Config)}


def _coerce(name, raw):
    kind = _FIELDS[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return raw.strip("'\"")


def load_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno + 1}: expected 'key = value'")
            key, raw = (part.strip() for part in body.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno + 1}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
    return values


def resolve_config(file_path=None, overrides=None, env=None):
    """File < SPDET_SEED < explicit overrides; validated before return."""
    env = os.environ if env is None else env
    values = {}
    if file_path:
        values.update(load_config_file(file_path))
    if SEED_ENV_VAR in env:
        values["seed"] = _coerce("seed", env[SEED_ENV_VAR])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return Config(**values).validate()
