from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Canonical manifold order; distance maps are always concatenated in this order.
MANIFOLD_ORDER = ("euclidean", "spd", "grassmann")
MANIFOLD_CODES = {"euclidean": "e", "spd": "s", "grassmann": "g"}
_MANIFOLD_ALIASES = {
    "e": "euclidean", "euclidean": "euclidean",
    "s": "spd", "spd": "spd",
    "g": "grassmann", "grassmann": "grassmann",
}


def parse_manifolds(value) -> tuple[str, ...]:
    """Accept 'e,s,g', ['spd', 'g'], ... and return canonical names in canonical order."""
    items = value.split(",") if isinstance(value, str) else list(value)
    names = set()
    for item in items:
        key = str(item).strip().lower()
        if not key:
            continue
        if key not in _MANIFOLD_ALIASES:
            raise ValueError(f"unknown manifold '{item}' (use e, s, g)")
        names.add(_MANIFOLD_ALIASES[key])
    if not names:
        raise ValueError("at least one manifold must be enabled")
    return tuple(m for m in MANIFOLD_ORDER if m in names)


def manifold_codes(manifolds: tuple[str, ...]) -> str:
    return ",".join(MANIFOLD_CODES[m] for m in manifolds)


class AttentionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    heads: int = Field(4, gt=0)
    model_dim: int = Field(256, gt=0)
    manifolds: tuple[str, ...] = ("euclidean",)
    fusion: Literal["early", "late"] = "early"
    negate_distances: bool = Field(False, description="Late fusion: softmax(-D) for SPD/Grassmann maps")
    qr_tolerance: float = Field(1e-10, gt=0)

    @field_validator("manifolds", mode="before")
    @classmethod
    def normalise_manifolds(cls, v):
        return parse_manifolds(v)

    @model_validator(mode="after")
    def check_dims(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if "spd" in self.manifolds and self.head_dim < 2:
            raise ValueError("SPD manifold needs head_dim >= 2 (covariance normalises by d-1)")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def is_vanilla(self) -> bool:
        return self.fusion == "early" and self.manifolds == ("euclidean",)

    @property
    def has_fusion_mix(self) -> bool:
        return self.fusion == "early" and not self.is_vanilla

    def for_tower(self, manifold: str) -> "AttentionConfig":
        return self.model_copy(update={"manifolds": (manifold,), "fusion": "late"})


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(32, gt=0)
    channels: int = Field(3, gt=0)
    patch_size: int = Field(4, gt=0)
    depth: int = Field(6, ge=0)
    mlp_ratio: int = Field(2, gt=0)
    num_classes: int = Field(10, gt=0)
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    pool: Literal["sequence_pool", "mean_pool"] = "sequence_pool"
    final_norm: bool = True

    @model_validator(mode="after")
    def check_geometry(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.attention.fusion == "late" and len(self.attention.manifolds) < 2:
            raise ValueError("late fusion needs at least two manifolds (one tower each)")
        return self

    @property
    def heads(self) -> int:
        return self.attention.heads

    @property
    def model_dim(self) -> int:
        return self.attention.model_dim

    @property
    def seq_len(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.model_dim

    @property
    def towers(self) -> tuple[str, ...]:
        """Late fusion runs one encoder tower per manifold; early fusion has a single stream."""
        return self.attention.manifolds if self.attention.fusion == "late" else ()

    @property
    def feature_dim(self) -> int:
        return self.model_dim * max(1, len(self.towers))


class NormStats(BaseModel):
    """Per-channel normalisation statistics from the training split."""
    model_config = ConfigDict(frozen=True)

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")
        return self


class ScheduleConfig(BaseModel):
    base_lr: float = Field(5e-4, ge=0)
    warmup_epochs: int = Field(10, ge=0)
    total_epochs: int = Field(200, gt=0)
    steps_per_epoch: int = Field(1, gt=0)

    @model_validator(mode="after")
    def check_warmup(self):
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs cannot exceed total_epochs")
        return self


class OptimConfig(BaseModel):
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)


class TrainConfig(BaseModel):
    epochs: int = Field(200, gt=0)
    batch_size: int = Field(128, gt=0)
    base_lr: float = Field(5e-4, ge=0)
    warmup_epochs: int = Field(10, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    label_smoothing: float = Field(0.1, ge=0, lt=1)
    mixup_alpha: float = Field(1.0, ge=0, description="0 disables mixup")
    augment: bool = True
    crop_pad: int = Field(4, ge=0)
    seed: int = 0
    eval_batch_size: int = Field(256, gt=0)

    def schedule(self, steps_per_epoch: int) -> ScheduleConfig:
        return ScheduleConfig(
            base_lr=self.base_lr,
            warmup_epochs=min(self.warmup_epochs, self.epochs),
            total_epochs=self.epochs,
            steps_per_epoch=steps_per_epoch,
        )

    def optim(self) -> OptimConfig:
        return OptimConfig(weight_decay=self.weight_decay)


class TrainReportRow(BaseModel):
    epoch: int
    train_loss: float
    eval_loss: float
    eval_acc: float = Field(..., ge=0, le=1)
    lr: float
    seconds: float


class GradCheckReport(BaseModel):
    name: str
    input_shapes: list[tuple[int, ...]]
    max_rel_error: float
    tolerance: float
    failing_index: Optional[tuple[int, ...]] = None
    failing_input: Optional[int] = None
    seed: Optional[int] = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


class PropertyResult(BaseModel):
    name: str
    passed: bool
    metric: float
    seed: int
    detail: str = ""

    def line(self) -> str:
        return f"PROP {self.name} {'PASS' if self.passed else 'FAIL'} {self.metric:.3e}"


class ParamBreakdown(BaseModel):
    embedder: int
    positional: int
    blocks: int
    fusion: int
    final_norm: int
    pooling: int
    classifier: int
    total: int


class FlopBreakdown(BaseModel):
    """FLOPs = 2 × multiply-accumulates, per forward pass of one image."""
    embedder: int
    projections: int
    distance_maps: int
    fusion: int
    attention_apply: int
    mlp: int
    head: int
    total: int


class AblationRow(BaseModel):
    fusion: Literal["early", "late"]
    manifolds: tuple[str, ...]
    params: int
    flops: int


class ImageRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray = Field(..., description="H×W×C values in [0, 1]")
    label: int = Field(..., ge=0)

    @field_validator("pixels")
    @classmethod
    def check_pixels(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 3:
            raise ValueError(f"pixels must be H×W×C, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        return v


class Batch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    images: np.ndarray = Field(..., description="B×H×W×C")
    targets: np.ndarray = Field(..., description="B×num_classes, rows sum to 1")

    @model_validator(mode="after")
    def check_targets(self):
        if self.images.ndim != 4 or self.targets.ndim != 2 or len(self.images) != len(self.targets):
            raise ValueError(f"batch shapes disagree: images {self.images.shape}, targets {self.targets.shape}")
        if not np.allclose(self.targets.sum(axis=1), 1.0, rtol=0, atol=1e-6):
            raise ValueError("every target row must sum to 1")
        return self

    @property
    def size(self) -> int:
        return len(self.images)
