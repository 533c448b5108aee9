"""Typed configuration, loss-weight warm-up schedule, and run metadata.

The on-disk format is a flat YAML mapping (scalar values only). Every key is
optional; missing keys fall back to the defaults below. Unknown keys are
rejected so typos fail loudly.

Schema (key -> default):
    visual_dim: 1024            pooled vision feature width
    joint_dim: 768              shared embedding width
    text_hidden_dim: 768        text-encoder token width
    context_len: 16             learnable context vectors per prompt stream
    meta_hidden: 256            hidden width of the conditional meta-network
    adapter_rank: 4             low-rank adapter rank (0 disables adapters)
    num_classes: 2              fixed, validated
    lambda_dis: 0.05            disentanglement weight
    lambda_div: 0.01            prompt diversity weight
    lambda_align_specific: 0.08   alignment weight, forgery-specific stream
    lambda_align_irrelevant: 0.12 alignment weight, forgery-irrelevant stream
    lambda_con: 0.1             supervised contrastive weight
    warmup_ratio: 0.1           fraction of steps over which weights ramp
    temperature: 0.07           contrastive temperature
    batch_size: 24
    learning_rate: 2e-4
    weight_decay: 5e-4
    stage1_steps: 200
    stage2_steps: 600
    seed: 0
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import yaml


class ConfigError(ValueError):
    """Raised for unparseable files, unknown keys, or invariant violations."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture widths shared by every module."""

    visual_dim: int = 1024
    joint_dim: int = 768
    text_hidden_dim: int = 768
    context_len: int = 16
    meta_hidden: int = 256
    adapter_rank: int = 4
    num_classes: int = 2

    def validate(self) -> None:
        for name in ("visual_dim", "joint_dim", "text_hidden_dim", "meta_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.context_len < 1:
            raise ConfigError(f"context_len must be >= 1, got {self.context_len}")
        if self.adapter_rank < 0:
            raise ConfigError(f"adapter_rank must be >= 0, got {self.adapter_rank}")
        if self.num_classes != 2:
            raise ConfigError(f"num_classes is fixed at 2, got {self.num_classes}")


@dataclass(frozen=True)
class LossWeights:
    """Target weights for the auxiliary objectives plus shared temperature."""

    lambda_dis: float = 0.05
    lambda_div: float = 0.01
    lambda_align_specific: float = 0.08
    lambda_align_irrelevant: float = 0.12
    lambda_con: float = 0.1
    warmup_ratio: float = 0.1
    temperature: float = 0.07

    def validate(self) -> None:
        for name in (
            "lambda_dis",
            "lambda_div",
            "lambda_align_specific",
            "lambda_align_irrelevant",
            "lambda_con",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError(f"warmup_ratio must lie in [0, 1], got {self.warmup_ratio}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 24
    learning_rate: float = 2e-4
    weight_decay: float = 5e-4
    stage1_steps: int = 200
    stage2_steps: int = 600
    seed: int = 0

    def validate(self) -> None:
        # contrastive terms need at least two samples per batch
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay <= 0:
            raise ConfigError(f"weight_decay must be positive, got {self.weight_decay}")
        if self.stage1_steps <= 0:
            raise ConfigError(f"stage1_steps must be positive, got {self.stage1_steps}")
        if self.stage2_steps <= 0:
            raise ConfigError(f"stage2_steps must be positive, got {self.stage2_steps}")


class ConfigBundle(NamedTuple):
    model: ModelConfig
    loss: LossWeights
    train: TrainConfig

    def to_dict(self) -> dict:
        out: dict = {}
        out.update(asdict(self.model))
        out.update(asdict(self.loss))
        out.update(asdict(self.train))
        return out

    def hash(self) -> str:
        """Stable hex digest of the full configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.train.validate()


_INT_KEYS = {
    "visual_dim",
    "joint_dim",
    "text_hidden_dim",
    "context_len",
    "meta_hidden",
    "adapter_rank",
    "num_classes",
    "batch_size",
    "stage1_steps",
    "stage2_steps",
    "seed",
}


def _coerce(key: str, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"key '{key}' must be a number, got {value!r}")
    if key in _INT_KEYS:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"key '{key}' must be an integer, got {value!r}")
        return int(value)
    return float(value)


def bundle_from_dict(raw: dict) -> ConfigBundle:
    """Build a validated ConfigBundle from a flat mapping of known keys."""
    known = {f.name: cls for cls in (ModelConfig, LossWeights, TrainConfig) for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    groups: dict[type, dict] = {ModelConfig: {}, LossWeights: {}, TrainConfig: {}}
    for key, value in raw.items():
        groups[known[key]][key] = _coerce(key, value)
    bundle = ConfigBundle(
        model=ModelConfig(**groups[ModelConfig]),
        loss=LossWeights(**groups[LossWeights]),
        train=TrainConfig(**groups[TrainConfig]),
    )
    bundle.model.validate()
    bundle.loss.validate()
    bundle.train.validate()
    return bundle


def load_config(path: str | Path) -> ConfigBundle:
    """Load and validate a flat YAML config file.

    Missing keys take the documented defaults; unknown keys raise ConfigError
    naming the offending key, as do invariant violations.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must be a flat key-value mapping")
    for key, value in raw.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"key '{key}' must be a scalar, got a nested value")
    return bundle_from_dict(raw)


def save_config(bundle: ConfigBundle, path: str | Path) -> None:
    """Serialize a bundle back to the flat YAML format (round-trips exactly)."""
    Path(path).write_text(yaml.safe_dump(bundle.to_dict(), sort_keys=True))


def warmup_weight(base: float, step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linearly ramped loss weight.

    Returns base * min(1, step / ceil(warmup_ratio * total_steps)); a zero-length
    warm-up window means the weight is base from step 0.
    """
    if base < 0:
        raise ValueError(f"base must be non-negative, got {base}")
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0 or step > total_steps:
        raise ValueError(f"step must lie in [0, total_steps], got {step}")
    window = math.ceil(warmup_ratio * total_steps)
    if window == 0:
        return base
    return base * min(1.0, step / window)
