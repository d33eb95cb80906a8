"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Values are parsed by the field's type; ``none`` clears an optional field.
Example::

    # FB15k-237 pretraining
    data_dir = data/FB15k-237
    dim = 400
    sub_dim = 20
    lr = 0.002
    gamma = 9.0

Command-line flags override file values. Only path settings may also come
from the environment (``GCOTE_DATA_DIR``, ``GCOTE_OUT_DIR``,
``GCOTE_CHECKPOINT``, ``GCOTE_INIT_CHECKPOINT``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Any

from .ote import VARIANTS, ModelConfig
from .train import STAGES, TrainConfig


class ConfigError(ValueError):
    pass


PATH_FIELDS = ("data_dir", "out_dir", "checkpoint", "init_checkpoint")
ENV_PREFIX = "GCOTE_"


@dataclass
class RunConfig:
    # paths
    data_dir: str | None = None
    out_dir: str | None = None
    checkpoint: str | None = None
    init_checkpoint: str | None = None
    # model
    dim: int = 400
    sub_dim: int = 20
    variant: str = "OTE"
    # training
    lr: float = 2e-3
    gamma: float = 9.0
    alpha: float = 1.0
    n_neg: int = 256
    batch_size: int = 1024
    max_steps: int = 240000
    valid_interval: int = 10000
    patience: int = 5
    stage: str = "pretrain"
    neighbor_cap: int | None = 64
    freeze_neighbors: bool = False
    det_check_interval: int = 1000
    log_interval: int = 100
    valid_limit: int | None = None
    seed: int = 0
    # runtime
    precision: int = 32
    threads: int | None = None
    deterministic: bool = False
    # evaluation
    split: str = "test"
    format: str = "text"
    report: str | None = None

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.split not in ("train", "valid", "test"):
            raise ConfigError("split must be train, valid or test")
        if self.format not in ("text", "structured"):
            raise ConfigError("format must be text or structured")
        try:
            self.train_config()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.dim % self.sub_dim or self.sub_dim < 2:
            raise ConfigError(f"sub_dim {self.sub_dim} must be >= 2 and divide dim {self.dim}")
        if self.variant == "RotatE" and self.sub_dim != 2:
            raise ConfigError("RotatE requires sub_dim = 2")
        return self

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.as_dict().items() if k in names})

    def model_config(self, num_entities: int, num_relations: int) -> ModelConfig:
        return ModelConfig(num_entities, num_relations, self.dim, self.sub_dim, self.variant)

    @property
    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == 64 else np.float32

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.as_dict().items())

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown setting {key!r}")
    kind = str(_TYPES[key])
    text = text.strip()
    optional = "None" in kind
    if text.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{key} may not be none")
    try:
        if kind.startswith("bool"):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {text!r}") from err
    return text


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as err:
            raise ConfigError(f"{source}:{lineno}: {err}") from err
    return out


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None, env=None) -> RunConfig:
    """File values, then environment path overrides, then explicit overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                values.update(parse_config(f.read(), path))
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
    env = os.environ if env is None else env
    for key in PATH_FIELDS:
        if f"{ENV_PREFIX}{key.upper()}" in env:
            values[key] = env[f"{ENV_PREFIX}{key.upper()}"]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()
