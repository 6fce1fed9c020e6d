"""Run configuration.

Keys use conventional hyperparameter names (``warmup_proportion``,
``plm_learning_rate``, ...). Defaults are sized for a CPU.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class Config:
    # model
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_i: int = 64
    d_v: int = 64
    max_len: int = 256
    rope_base: float = 10000.0
    alpha: float = 0.5
    image_size: int = 224
    patch_size: int = 32
    patch_seed: int = 0
    dtype: str = "float64"

    # optimisation
    batch_size: int = 4
    plm_learning_rate: float = 2e-4
    others_learning_rate: float = 1e-3
    plm_weight_decay: float = 0.1
    others_weight_decay: float = 0.0
    warmup_proportion: float = 0.1
    max_gradient_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bce_eps: float = 1e-7
    pair_mask: str = "all"

    # schedule
    fine_tuning_epochs: int = 20
    fine_tuning_epoch_patience: int = 3
    few_shot_epochs: int = 200
    few_shot_epoch_patience: int = 10
    few_shot: bool = False
    epochs: int | None = None
    patience: int | None = None
    target_train_f1: float | None = None
    eval_train: bool = False

    # decoding
    threshold: float = 0.5
    max_pieces: int = 4
    max_span_len: int = 16
    decode_budget: int = 200_000

    num_threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_h <= 0 or self.n_heads <= 0 or self.n_layers < 0:
            raise ConfigError("d_h, n_heads must be positive and n_layers non-negative")
        if self.d_h % self.n_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")
        if self.d_i <= 0 or self.d_i % 2:
            raise ConfigError(f"d_i must be a positive even number, got {self.d_i}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        if self.pair_mask not in ("all", "trigger_text"):
            raise ConfigError(f"pair_mask must be 'all' or 'trigger_text', got {self.pair_mask!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.batch_size < 1 or self.max_pieces < 1 or self.max_span_len < 1:
            raise ConfigError("batch_size, max_pieces and max_span_len must be >= 1")
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ConfigError("warmup_proportion must lie in [0, 1]")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return self.few_shot_epochs if self.few_shot else self.fine_tuning_epochs

    @property
    def num_patience(self) -> int:
        if self.patience is not None:
            return self.patience
        return self.few_shot_epoch_patience if self.few_shot else self.fine_tuning_epoch_patience

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "Config":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(name: str, value: Any) -> Any:
    default = _FIELDS[name].default
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int) or name in ("epochs", "patience"):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected an integer, got {value!r}") from None
    if isinstance(default, float) or name == "target_train_f1":
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    return value


def from_dict(values: dict[str, Any]) -> Config:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**{k: _coerce(k, v) for k, v in values.items()})


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Raw key/value pairs of a YAML or JSON config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        loaded = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from None
    if not isinstance(loaded, dict):
        raise ConfigError(f"config {path} must be a key/value mapping")
    return loaded


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> Config:
    """Defaults, then the YAML/JSON file at ``path``, then ``overrides``."""
    values: dict[str, Any] = read_config_file(path) if path is not None else {}
    values.update(overrides or {})
    return from_dict(values)
