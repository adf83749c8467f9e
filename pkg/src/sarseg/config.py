"""Model and training configuration: dataclasses, presets, JSON loading and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 1024
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    global_attn_layers: tuple[int, ...] = (2, 5, 8, 11)
    window_size: int = 14
    mlp_ratio: float = 4.0
    adapter_hidden_ratio: float = 0.25
    tsi_dim: int = 24
    neck_dim: int = 256
    decoder_dim: int = 256
    decoder_heads: int = 8
    decoder_mlp_dim: int = 2048
    upscale_dims: tuple[int, ...] = (256, 64, 32)
    classwise_channels: int = 32
    num_classes: int = 5
    num_mask_slots: int = 4
    lpf_fraction: float = 0.25
    tsi_enabled: bool = True
    adapters_enabled: bool = True
    feature_enhance_enabled: bool = True

    def __post_init__(self):
        # JSON gives lists; keep the dataclass hashable
        object.__setattr__(self, "global_attn_layers", tuple(self.global_attn_layers))
        object.__setattr__(self, "upscale_dims", tuple(self.upscale_dims))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def adapter_hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.adapter_hidden_ratio))

    @property
    def mask_size(self) -> int:
        """Side length of the class logit map (4x the token grid)."""
        return 4 * self.grid_size

    def validate(self) -> "ModelConfig":
        _positive_ints(self, ["image_size", "patch_size", "embed_dim", "depth", "num_heads",
                              "window_size", "tsi_dim", "neck_dim", "decoder_dim", "decoder_heads",
                              "decoder_mlp_dim", "classwise_channels"])
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size: {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads: embed_dim {self.embed_dim} is not divisible by {self.num_heads}")
        if not self.adapter_hidden_ratio > 0 or self.adapter_hidden_dim < 1:
            raise ConfigError(f"adapter_hidden_ratio: hidden dim round({self.embed_dim}*{self.adapter_hidden_ratio}) < 1")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio: must be positive")
        for i in self.global_attn_layers:
            if not 0 <= i < self.depth:
                raise ConfigError(f"global_attn_layers: index {i} outside [0, {self.depth})")
        if not 0 < self.lpf_fraction <= 1:
            raise ConfigError(f"lpf_fraction: {self.lpf_fraction} outside (0, 1]")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes: {self.num_classes} < 2")
        if self.num_mask_slots < 1:
            raise ConfigError(f"num_mask_slots: {self.num_mask_slots} < 1")
        if len(self.upscale_dims) != 3 or min(self.upscale_dims) < 1:
            raise ConfigError(f"upscale_dims: expected 3 positive channel counts, got {list(self.upscale_dims)}")
        if self.upscale_dims[0] != self.decoder_dim:
            raise ConfigError(f"upscale_dims: first entry {self.upscale_dims[0]} must equal decoder_dim {self.decoder_dim}")
        if (self.decoder_dim // 2) % self.decoder_heads:
            raise ConfigError(f"decoder_heads: decoder_dim/2 = {self.decoder_dim // 2} not divisible by {self.decoder_heads}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 2e-4
    min_lr: float = 0.0
    epochs: int = 120
    max_steps: Optional[int] = None
    batch_size: int = 1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    class_weights: Optional[tuple[float, ...]] = None
    ignore_index: int = 255
    background_class: Optional[int] = None
    loss: str = "sigmoid"
    seed: int = 0
    dtype: str = "float64"
    input_normalization: str = "scale"
    checkpoint_dir: str = "checkpoints"
    eval_interval: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    def weights_for(self, num_classes: int) -> tuple[float, ...]:
        return self.class_weights if self.class_weights is not None else (1.0,) * num_classes

    def validate(self, model: Optional[ModelConfig] = None) -> "TrainConfig":
        if not self.initial_lr > 0:
            raise ConfigError(f"initial_lr: {self.initial_lr} must be > 0")
        if not 0 <= self.min_lr <= self.initial_lr:
            raise ConfigError(f"min_lr: {self.min_lr} outside [0, initial_lr]")
        _positive_ints(self, ["epochs", "batch_size"])
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps: {self.max_steps} < 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas: {list(self.betas)} must be two values in [0, 1)")
        if self.loss not in ("sigmoid", "softmax"):
            raise ConfigError(f"loss: {self.loss!r} not in ('sigmoid', 'softmax')")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: {self.dtype!r} not in ('float32', 'float64')")
        if self.input_normalization not in ("scale", "minmax"):
            raise ConfigError(f"input_normalization: {self.input_normalization!r} not in ('scale', 'minmax')")
        if self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise ConfigError("eval_interval/checkpoint_interval: must be >= 0")
        if self.class_weights is not None:
            if not all(w > 0 and w < float("inf") for w in self.class_weights):
                raise ConfigError("class_weights: every weight must be finite and > 0")
            if model is not None and len(self.class_weights) != model.num_classes:
                raise ConfigError(
                    f"class_weights: length {len(self.class_weights)} != num_classes {model.num_classes}")
        if model is not None:
            if 0 <= self.ignore_index < model.num_classes:
                raise ConfigError(f"ignore_index: {self.ignore_index} collides with a class label")
            if self.background_class is not None and not 0 <= self.background_class < model.num_classes:
                raise ConfigError(f"background_class: {self.background_class} outside [0, {model.num_classes})")
        return self


def _positive_ints(obj, names):
    for name in names:
        value = getattr(obj, name)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ConfigError(f"{name}: expected a positive integer, got {value!r}")


PRESETS: dict[str, dict[str, Any]] = {
    "sam-base": dict(
        image_size=1024, patch_size=16, embed_dim=768, depth=12, num_heads=12,
        global_attn_layers=(2, 5, 8, 11), window_size=14, adapter_hidden_ratio=0.25,
        tsi_dim=24, neck_dim=256, decoder_dim=256, decoder_heads=8, decoder_mlp_dim=2048,
        upscale_dims=(256, 64, 32), classwise_channels=32, num_mask_slots=4, num_classes=5,
    ),
    "desk-tiny": dict(
        image_size=128, patch_size=16, embed_dim=64, depth=4, num_heads=4,
        global_attn_layers=(1, 3), window_size=4, adapter_hidden_ratio=0.25,
        tsi_dim=8, neck_dim=32, decoder_dim=32, decoder_heads=4, decoder_mlp_dim=256,
        upscale_dims=(32, 16, 8), classwise_channels=8, num_mask_slots=4, num_classes=5,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    """Return a named architecture, optionally with field overrides."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return _build(ModelConfig, {**base, **overrides}, "model").validate()


def _build(cls, data: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def to_dict(cfg) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def parse_config(doc: dict) -> tuple[ModelConfig, TrainConfig]:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = sorted(set(doc) - {"model", "train"})
    if unknown:
        raise ConfigError(f"config: unknown top-level key(s) {unknown}")
    model_doc = dict(doc.get("model", {}))
    base = {}
    if "preset" in model_doc:
        name = model_doc.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"model.preset: unknown preset {name!r}")
        base = dict(PRESETS[name])
    model = _build(ModelConfig, {**base, **model_doc}, "model").validate()
    train = _build(TrainConfig, dict(doc.get("train", {})), "train").validate(model)
    return model, train


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a JSON config with top-level "model" and "train" objects."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)


def dump_config(model: ModelConfig, train: Optional[TrainConfig] = None) -> str:
    doc = {"model": to_dict(model), "train": to_dict(train or TrainConfig())}
    return json.dumps(doc, indent=2, sort_keys=True)


def fingerprint(model: ModelConfig) -> str:
    """SHA-256 over the canonical JSON serialization of a model config."""
    canon = json.dumps(to_dict(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
