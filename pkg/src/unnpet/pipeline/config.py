"""Training and inference settings."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..models import COUNT_LEVELS, DenoiserConfig
from ..objectives import LossConfig


@dataclass
class TrainConfig:
    """Settings for one training stage.

    Stage 1 defaults to batch 15 on 20x64x64 patches, stage 2 to batch 1 on
    full slabs. Learning rate, step budget and patience are tuning knobs.
    """

    stage: int = 1
    count_level: float | None = None
    batch_size: int | None = None
    patch_shape: tuple | None = None
    learning_rate: float = 1e-4
    max_steps: int = 2000
    val_every: int = 50
    patience: int = 10            # validation rounds without improvement
    n_val_patches: int = 8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    gating_filters: int = 32
    fusion_filters: int = 32
    slab_depth: int = 20
    slab_start_step: int = 1      # stage 2: slab starts are multiples of this
    checkpoint_every: int = 0     # steps between resumable state dumps (0 = off)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.batch_size is None:
            self.batch_size = 15 if self.stage == 1 else 1
        if self.stage == 2 and self.batch_size != 1:
            raise ValueError("stage 2 trains with batch size 1")
        if self.stage == 1:
            if self.count_level is None or not any(abs(self.count_level - f) < 1e-9 for f in COUNT_LEVELS):
                raise ValueError(f"stage 1 needs count_level in {COUNT_LEVELS}, got {self.count_level}")
            if self.patch_shape is None:
                self.patch_shape = (20, 64, 64)
            self.patch_shape = tuple(int(v) for v in self.patch_shape)
            self.denoiser.stage_extents(self.patch_shape)
        if self.learning_rate < 0 or self.max_steps < 0 or self.batch_size < 1:
            raise ValueError("learning_rate and max_steps must be non-negative, batch_size positive")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


@dataclass(frozen=True)
class InferenceConfig:
    patch_depth: int = 20
    stride: int = 10

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch_depth:
            raise ValueError(f"stride {self.stride} must lie in [1, patch_depth={self.patch_depth}]")
