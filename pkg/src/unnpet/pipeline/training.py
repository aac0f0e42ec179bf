"""Two-stage training: per-level denoisers, then gating + fusion on frozen denoisers."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..models import (
    COUNT_LEVELS,
    Denoiser,
    FusionConfig,
    FusionHead,
    NoiseAwareConfig,
    NoiseAwareNet,
    SlabShapeError,
    UnnModel,
    architecture_fingerprint,
    level_name,
)
from ..objectives import composite_loss, ssim_3axis, stage2_loss
from ..tensor import Adam, AdamConfig, ConfigurationError, Tensor, TrainingDivergedError, no_grad
from ..volume import DatasetManifest, atomic_write_text
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    FingerprintMismatchError,
    checkpoint_from_model,
    model_from_checkpoint,
    normalize_fingerprint,
    read_checkpoint,
    write_checkpoint,
)
from .config import TrainConfig
from .data import load_level_pairs, load_subject_levels, match_level
from .patches import extract_patches

logger = logging.getLogger(__name__)

__all__ = [
    "TrainResult",
    "fit_denoiser",
    "fit_unn",
    "train_stage1",
    "train_stage2",
    "assemble_unn",
    "slab_starts",
    "write_curve",
]


@dataclass
class TrainResult:
    model: object
    checkpoint: Checkpoint
    curve: list
    best_metric: float
    best_step: int
    steps_run: int
    stopped_early: bool
    extras: dict = field(default_factory=dict)


def write_curve(rows: list[dict], path) -> None:
    if not rows:
        atomic_write_text(path, "")
        return
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in cols})
    atomic_write_text(path, buf.getvalue())


def _config_record(cfg: TrainConfig) -> dict:
    rec = json.loads(json.dumps(asdict(cfg)))
    rec.pop("max_steps")   # extending the budget on resume is allowed
    return rec


# -- generic loop with early stopping and resumable state ----------------------

class _Loop:
    def __init__(self, model, params: list[tuple[str, Tensor]], cfg: TrainConfig, higher_is_better: bool,
                 metric_name: str, state_path=None):
        self.model = model
        self.named = params
        self.cfg = cfg
        self.higher = higher_is_better
        self.metric_name = metric_name
        self.state_path = Path(state_path) if state_path else None
        self.opt = Adam([p for _, p in params], AdamConfig(learning_rate=cfg.learning_rate))
        self.step = 0
        self.best_metric = None
        self.best_step = 0
        self.best_params = None
        self.bad_rounds = 0
        self.stopped = False
        self.curve: list[dict] = []

    def _snapshot(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.named)

    def _improved(self, metric: float) -> bool:
        if self.best_metric is None:
            return True
        return metric > self.best_metric if self.higher else metric < self.best_metric

    def record_validation(self, metric: float) -> None:
        if not math.isfinite(metric):
            raise TrainingDivergedError(f"validation {self.metric_name} is {metric} at step {self.step}")
        if self._improved(metric):
            self.best_metric, self.best_step, self.best_params = metric, self.step, self._snapshot()
            self.bad_rounds = 0
        else:
            self.bad_rounds += 1
            if self.bad_rounds >= self.cfg.patience:
                self.stopped = True
                logger.info("early stop at step %d (best %s %.6g at step %d)",
                            self.step, self.metric_name, self.best_metric, self.best_step)

    # state file ------------------------------------------------------------
    def save_state(self) -> None:
        if self.state_path is None:
            return
        tensors = OrderedDict()
        for n, p in self.named:
            tensors["param." + n] = p.data
        for n, arr in (self.best_params or {}).items():
            tensors["best." + n] = arr
        tensors.update(self.opt.state_arrays())
        meta = {
            "step": self.step, "best_metric": self.best_metric, "best_step": self.best_step,
            "bad_rounds": self.bad_rounds, "stopped": self.stopped, "curve": self.curve,
            "adam_step": self.opt.config.step_count, "config": _config_record(self.cfg),
        }
        fp = architecture_fingerprint(self.model)
        write_checkpoint(Checkpoint("train_state", fp, tensors, meta), self.state_path)

    def load_state(self) -> bool:
        if self.state_path is None or not self.state_path.exists():
            return False
        st = read_checkpoint(self.state_path)
        if st.kind != "train_state":
            raise CheckpointError(f"{self.state_path} is not a training state file")
        if normalize_fingerprint(st.fingerprint) != normalize_fingerprint(architecture_fingerprint(self.model)):
            raise FingerprintMismatchError(f"{self.state_path} belongs to a different architecture")
        if st.metadata["config"] != _config_record(self.cfg):
            raise ConfigurationError(f"{self.state_path} was written with a different training config")
        for n, p in self.named:
            p.data = st.tensors["param." + n].astype(p.dtype)
        best = OrderedDict((n, st.tensors["best." + n].astype(p.dtype)) for n, p in self.named
                           if "best." + n in st.tensors)
        self.best_params = best or None
        self.opt.load_state_arrays(st.tensors, st.metadata["adam_step"])
        m = st.metadata
        self.step, self.best_metric, self.best_step = m["step"], m["best_metric"], m["best_step"]
        self.bad_rounds, self.stopped, self.curve = m["bad_rounds"], m["stopped"], m["curve"]
        logger.info("resumed from %s at step %d", self.state_path, self.step)
        return True

    def run(self, step_fn: Callable[[int], float], val_fn: Callable[[], dict], resume: bool = False,
            progress: Callable[[dict], None] | None = None) -> None:
        cfg = self.cfg
        if not (resume and self.load_state()):
            vals = val_fn()
            self.curve.append({"step": 0, "train_loss": None, **vals})
            self.record_validation(vals[self.metric_name])
        while self.step < cfg.max_steps and not self.stopped:
            loss = step_fn(self.step)
            self.opt.step()
            self.step += 1
            row = {"step": self.step, "train_loss": loss}
            if self.step % cfg.val_every == 0 or self.step == cfg.max_steps:
                vals = val_fn()
                row.update(vals)
                self.record_validation(vals[self.metric_name])
            self.curve.append(row)
            if progress is not None:
                progress(row)
            if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self.save_state()
        if self.state_path is not None:
            self.save_state()
        for n, p in self.named:
            p.data = self.best_params[n].copy()


def _check_loss(loss: Tensor, step: int, what: str, x: np.ndarray) -> float:
    val = float(loss.data)
    if not math.isfinite(val):
        finite = x[np.isfinite(x)]
        stats = (f"min={finite.min():.4g} max={finite.max():.4g} mean={finite.mean():.4g}"
                 if finite.size else "no finite values")
        raise TrainingDivergedError(
            f"{what} loss became {val} at step {step}; batch input {stats} "
            f"({x.size - finite.size} non-finite voxels). Lower the learning rate or check the data.")
    return val


# -- stage 1 --------------------------------------------------------------------

def fit_denoiser(train_inputs, train_labels, val_inputs, val_labels, cfg: TrainConfig, *,
                 model: Denoiser | None = None, state_path=None, resume: bool = False,
                 curve_path=None, progress=None) -> TrainResult:
    """Train one denoiser on paired volumes; keeps the best validation-SSIM parameters."""
    if not train_inputs:
        raise ValueError("no training volumes")
    if not val_inputs:
        raise ValueError("no validation volumes")
    if model is None:
        model = Denoiser(cfg.denoiser, seed=cfg.seed, count_level=cfg.count_level)
    dtype = model.final.weight.dtype
    val = extract_patches(val_inputs, val_labels, cfg.patch_shape, cfg.n_val_patches, seed=(cfg.seed, 1))

    def step_fn(step):
        b = extract_patches(train_inputs, train_labels, cfg.patch_shape, cfg.batch_size, seed=(cfg.seed, 0, step))
        x, y = b.inputs.astype(dtype), b.labels.astype(dtype)
        loss = composite_loss(y, model(Tensor(x)), cfg.loss)
        val_ = _check_loss(loss, step, "stage-1", x)
        loss.backward()
        return val_

    def val_fn():
        scores = []
        with no_grad():
            for i in range(len(val.inputs)):
                x, y = val.inputs[i:i + 1].astype(dtype), val.labels[i:i + 1].astype(dtype)
                scores.append(float(ssim_3axis(y, model(Tensor(x)), cfg.loss.ssim).data))
        return {"val_ssim": float(np.mean(scores))}

    loop = _Loop(model, list(model.named_parameters()), cfg, True, "val_ssim", state_path)
    loop.run(step_fn, val_fn, resume=resume, progress=progress)
    if curve_path is not None:
        write_curve(loop.curve, curve_path)
    meta = {"stage": 1, "count_level": cfg.count_level, "step": loop.best_step, "steps_run": loop.step,
            "val_ssim": loop.best_metric, "seed": cfg.seed}
    model.checkpoint_metadata = meta
    return TrainResult(model, checkpoint_from_model(model, meta), loop.curve, loop.best_metric,
                       loop.best_step, loop.step, loop.stopped)


def train_stage1(manifest: DatasetManifest, count_level: float, cfg: TrainConfig,
                 val_manifest: DatasetManifest | None = None, **kw) -> TrainResult:
    """Train ``Net_f`` from a manifest; ``val_manifest`` supplies the validation subjects."""
    f = match_level(count_level)
    if cfg.count_level is None or abs(cfg.count_level - f) > 1e-9:
        raise ValueError(f"config count_level {cfg.count_level} disagrees with requested {f:g}")
    xs, ys, ids = load_level_pairs(manifest, f)
    if not xs:
        raise ValueError(f"manifest has no (input, label) pairs at count level {f:g}")
    if val_manifest is None:
        raise ValueError("a validation manifest is required")
    vx, vy, _ = load_level_pairs(val_manifest, f)
    logger.info("training %s on %d subjects", level_name(f), len(ids))
    return fit_denoiser(xs, ys, vx, vy, cfg, **kw)


# -- stage 2 --------------------------------------------------------------------

def slab_starts(depth: int, slab_depth: int, step: int) -> list[int]:
    if depth < slab_depth:
        raise ValueError(f"volume depth {depth} is smaller than the slab depth {slab_depth}")
    starts = list(range(0, depth - slab_depth + 1, step))
    if starts[-1] != depth - slab_depth:
        starts.append(depth - slab_depth)
    return starts


def assemble_unn(denoisers, slab_shape, gating_filters: int = 32, fusion_filters: int = 32,
                 seed: int = 0) -> UnnModel:
    """Build a UNN around six trained denoisers (models or checkpoint paths, ordered by level)."""
    denoisers = list(denoisers)
    if len(denoisers) != len(COUNT_LEVELS):
        raise ConfigurationError(f"need {len(COUNT_LEVELS)} denoisers, got {len(denoisers)}")
    models = []
    for f, d in zip(COUNT_LEVELS, denoisers):
        if not isinstance(d, Denoiser):
            ckpt = read_checkpoint(d)
            if ckpt.kind != "denoiser":
                raise CheckpointError(f"{d} holds a {ckpt.kind!r} checkpoint, not a denoiser")
            d = model_from_checkpoint(ckpt)
        if d.count_level is None or abs(d.count_level - f) > 1e-9:
            raise ConfigurationError(f"denoiser for level {f:g} was trained at {d.count_level}")
        models.append(d)
    ref = normalize_fingerprint(architecture_fingerprint(models[0]))
    for f, d in zip(COUNT_LEVELS, models):
        if normalize_fingerprint(architecture_fingerprint(d)) != ref:
            raise FingerprintMismatchError(
                f"{level_name(f)} architecture differs from {level_name(COUNT_LEVELS[0])}")
    ss = np.random.SeedSequence([seed, 2])
    gseed, fseed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    gating = NoiseAwareNet(NoiseAwareConfig(slab_shape=tuple(slab_shape), filters=gating_filters), seed=gseed)
    fusion = FusionHead(FusionConfig(filters=fusion_filters), seed=fseed)
    return UnnModel(models, gating, fusion, frozen_denoisers=True)


def fit_unn(model: UnnModel, train_data: list[dict], val_data: list[dict], cfg: TrainConfig, *,
            state_path=None, resume: bool = False, curve_path=None, progress=None,
            cache: dict | None = None) -> TrainResult:
    """Train gating + fusion with the denoisers frozen.

    ``train_data``/``val_data`` hold one dict per subject as produced by
    ``load_subject_levels``. Denoiser outputs are cached per (split, subject,
    level, slab start) since the frozen denoisers are deterministic.
    """
    if not train_data or not val_data:
        raise ValueError("stage 2 needs non-empty training and validation subjects")
    model.set_frozen(True)
    depth = cfg.slab_depth
    shape = train_data[0]["label"].shape
    slab_shape = (depth,) + tuple(shape[1:])
    if tuple(model.gating.config.slab_shape) != slab_shape:
        raise SlabShapeError(f"data slabs {slab_shape} do not fit gating slab_shape {model.gating.config.slab_shape}")
    starts = slab_starts(shape[0], depth, cfg.slab_start_step)
    dtype = model.fusion.convs[0].weight.dtype
    cache = {} if cache is None else cache

    def slab(rec, key, start):
        return rec[key][start:start + depth][None, None].astype(dtype)

    def denoised(split, i, rec, f, start):
        k = (split, rec["subject"], f, start)
        if k not in cache:
            with no_grad():
                x = Tensor(slab(rec, f, start))
                cache[k] = [d(x).data for d in model.denoisers]
        return cache[k]

    def step_fn(step):
        rng = np.random.default_rng((cfg.seed, 3, step))
        f = COUNT_LEVELS[int(rng.integers(len(COUNT_LEVELS)))]
        i = int(rng.integers(len(train_data)))
        start = starts[int(rng.integers(len(starts)))]
        rec = train_data[i]
        x = slab(rec, f, start)
        y = slab(rec, "label", start)
        out = model(Tensor(x), denoised=denoised("train", i, rec, f, start))
        loss = stage2_loss(y, out.out, out.weighted_sum, cfg.loss)
        v = _check_loss(loss, step, "stage-2", x)
        loss.backward()
        return v

    val_start = starts[len(starts) // 2]
    uniform = np.full((1, len(COUNT_LEVELS)), 1.0 / len(COUNT_LEVELS), dtype=dtype)
    baseline = []
    for i, rec in enumerate(val_data):
        for f in COUNT_LEVELS:
            den = denoised("val", i, rec, f, val_start)
            ws = sum(u * d for u, d in zip(uniform[0], den))
            y = slab(rec, "label", val_start)
            baseline.append(2.0 * float(composite_loss(y, ws, cfg.loss).data))
    baseline_loss = float(np.mean(baseline))

    def val_fn():
        losses = []
        with no_grad():
            for i, rec in enumerate(val_data):
                for f in COUNT_LEVELS:
                    x = slab(rec, f, val_start)
                    y = slab(rec, "label", val_start)
                    out = model(Tensor(x), denoised=denoised("val", i, rec, f, val_start))
                    losses.append(float(stage2_loss(y, out.out, out.weighted_sum, cfg.loss).data))
        return {"val_loss": float(np.mean(losses)), "baseline_val_loss": baseline_loss}

    params = [("gating." + n, p) for n, p in model.gating.named_parameters()]
    params += [("fusion." + n, p) for n, p in model.fusion.named_parameters()]
    loop = _Loop(model, params, cfg, False, "val_loss", state_path)
    loop.run(step_fn, val_fn, resume=resume, progress=progress)
    if curve_path is not None:
        write_curve(loop.curve, curve_path)
    meta = {"stage": 2, "step": loop.best_step, "steps_run": loop.step, "val_loss": loop.best_metric,
            "baseline_val_loss": baseline_loss, "seed": cfg.seed}
    model.checkpoint_metadata = meta
    return TrainResult(model, checkpoint_from_model(model, meta), loop.curve, loop.best_metric,
                       loop.best_step, loop.step, loop.stopped, {"baseline_val_loss": baseline_loss})


def train_stage2(manifest: DatasetManifest, denoisers, cfg: TrainConfig,
                 val_manifest: DatasetManifest | None = None, **kw) -> TrainResult:
    """Assemble a UNN from six stage-1 checkpoints (or a ``{level: path}`` dict) and train it."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    if isinstance(denoisers, dict):
        missing = [f for f in COUNT_LEVELS if not any(abs(f - k) < 1e-9 for k in denoisers)]
        if missing:
            raise FileNotFoundError("missing stage-1 checkpoints for " +
                                    ", ".join(f"{level_name(f)} (count level {f:g})" for f in missing))
        denoisers = [denoisers[match_level(f, list(denoisers))] for f in COUNT_LEVELS]
    if val_manifest is None:
        raise ValueError("a validation manifest is required")
    train = load_subject_levels(manifest)
    val = load_subject_levels(val_manifest)
    if not train:
        raise ValueError("manifest has no subject with all six count levels and a label")
    if not val:
        raise ValueError("validation manifest has no complete subject")
    slab_shape = (cfg.slab_depth,) + tuple(train[0]["label"].shape[1:])
    model = assemble_unn(denoisers, slab_shape, cfg.gating_filters, cfg.fusion_filters, cfg.seed)
    return fit_unn(model, train, val, cfg, **kw)
