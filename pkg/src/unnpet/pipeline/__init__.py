"""Training, checkpointing, stitched inference and evaluation."""
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    CorruptCheckpointError,
    FingerprintMismatchError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from .config import InferenceConfig, TrainConfig
from .data import load_level_pairs, load_subject_levels, split_subjects
from .evaluation import METHODS, evaluate, format_table, report_weights, weight_spread
from .inference import InferenceResult, coverage_counts, infer_all, infer_volume
from .patches import PatchBatch, extract_patches
from .training import TrainResult, assemble_unn, fit_denoiser, fit_unn, slab_starts, train_stage1, train_stage2

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "CorruptCheckpointError",
    "FingerprintMismatchError",
    "InferenceConfig",
    "InferenceResult",
    "METHODS",
    "PatchBatch",
    "TrainConfig",
    "TrainResult",
    "assemble_unn",
    "coverage_counts",
    "evaluate",
    "extract_patches",
    "fit_denoiser",
    "fit_unn",
    "format_table",
    "infer_all",
    "infer_volume",
    "load_checkpoint",
    "load_level_pairs",
    "load_subject_levels",
    "read_checkpoint",
    "report_weights",
    "save_checkpoint",
    "slab_starts",
    "split_subjects",
    "train_stage1",
    "train_stage2",
    "weight_spread",
    "write_checkpoint",
]
