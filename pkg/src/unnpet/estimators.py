"""scikit-learn style wrappers around the training and inference pipeline.

Volumes are passed as arrays shaped ``(n, D, H, W)`` (a single ``(D, H, W)``
volume is also accepted). The unified model takes its training inputs as
``(n, 6, D, H, W)``: every subject at each count level, ordered like
``COUNT_LEVELS``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .models import COUNT_LEVELS, Denoiser, DenoiserConfig
from .objectives import LossConfig, psnr
from .pipeline.config import InferenceConfig, TrainConfig
from .pipeline.inference import infer_volume
from .pipeline.training import assemble_unn, fit_denoiser, fit_unn
from .volume import Volume

__all__ = ["CountLevelDenoiser", "UnifiedNoiseAwareDenoiser", "check_volume_batch", "check_paired_volumes"]


def check_volume_batch(X, name: str = "X", ndim: int = 4) -> np.ndarray:
    """Validate and convert to a finite float32 array with ``ndim`` axes."""
    arr = np.asarray(X.data if isinstance(X, Volume) else X, dtype=np.float32)
    if arr.ndim == ndim - 1:
        arr = arr[None]
    if arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} (or {ndim - 1}) dimensions, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_paired_volumes(X, y, x_ndim: int = 4) -> tuple[np.ndarray, np.ndarray]:
    X = check_volume_batch(X, "X", x_ndim)
    y = check_volume_batch(y, "y", 4)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")
    if X.shape[-3:] != y.shape[-3:]:
        raise ValueError(f"X volumes {X.shape[-3:]} and y volumes {y.shape[-3:]} differ in shape")
    return X, y


def _holdout(X, y, X_val, y_val):
    if X_val is not None:
        return X, y, *check_paired_volumes(X_val, y_val, X.ndim)
    if len(X) > 1:
        return X[:-1], y[:-1], X[-1:], y[-1:]
    return X, y, X, y


class CountLevelDenoiser(BaseEstimator, TransformerMixin):
    """One denoiser trained at a single count level (``Net_f``)."""

    def __init__(self, count_level: float = 0.5, base_filters: int = 32, patch_shape=(20, 64, 64),
                 batch_size: int = 15, learning_rate: float = 1e-4, max_steps: int = 2000, val_every: int = 50,
                 patience: int = 10, n_val_patches: int = 8, lambda_a: float = 0.6, skip: str = "additive",
                 residual: bool = True, patch_depth: int = 20, stride: int = 10, random_state: int = 0):
        self.count_level = count_level
        self.base_filters = base_filters
        self.patch_shape = patch_shape
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.val_every = val_every
        self.patience = patience
        self.n_val_patches = n_val_patches
        self.lambda_a = lambda_a
        self.skip = skip
        self.residual = residual
        self.patch_depth = patch_depth
        self.stride = stride
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            stage=1, count_level=self.count_level, batch_size=self.batch_size, patch_shape=tuple(self.patch_shape),
            learning_rate=self.learning_rate, max_steps=self.max_steps, val_every=self.val_every,
            patience=self.patience, n_val_patches=self.n_val_patches, seed=self.random_state,
            loss=LossConfig(lambda_a=self.lambda_a),
            denoiser=DenoiserConfig(base_filters=self.base_filters, skip=self.skip, residual=self.residual))

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on paired low-count ``X`` and full-count ``y``.

        Without explicit validation data the last pair is held out (or, for a
        single pair, the training pair doubles as validation).
        """
        X, y = check_paired_volumes(X, y)
        cfg = self._train_config()
        Xt, yt, Xv, yv = _holdout(X, y, X_val, y_val)
        res = fit_denoiser(list(Xt), list(yt), list(Xv), list(yv), cfg)
        self.model_ = res.model
        self.curve_ = res.curve
        self.best_val_ssim_ = res.best_metric
        self.n_steps_ = res.steps_run
        return self

    @classmethod
    def from_model(cls, model: Denoiser, **params) -> "CountLevelDenoiser":
        est = cls(count_level=model.count_level, base_filters=model.config.base_filters,
                  skip=model.config.skip, residual=model.config.residual, **params)
        est.model_ = model
        return est

    def _icfg(self):
        return InferenceConfig(self.patch_depth, self.stride)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_volume_batch(X)
        return np.stack([infer_volume(Volume(v), self.model_, self._icfg()).volume.data for v in X])

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the predictions against ``y``."""
        X, y = check_paired_volumes(X, y)
        return float(np.mean([psnr(t, p) for t, p in zip(y, self.predict(X))]))


class UnifiedNoiseAwareDenoiser(BaseEstimator, TransformerMixin):
    """Gating network and fusion head on top of six fitted count-level denoisers.

    ``predict`` returns the fusion output; ``transform`` returns the weighted
    sum of the denoiser outputs; ``predict_weights`` returns the slab-averaged
    weight vectors.
    """

    def __init__(self, denoisers=None, gating_filters: int = 32, fusion_filters: int = 32,
                 learning_rate: float = 1e-4, max_steps: int = 1000, val_every: int = 50, patience: int = 10,
                 lambda_a: float = 0.6, slab_depth: int = 20, slab_start_step: int = 1, stride: int = 10,
                 random_state: int = 0):
        self.denoisers = denoisers
        self.gating_filters = gating_filters
        self.fusion_filters = fusion_filters
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.val_every = val_every
        self.patience = patience
        self.lambda_a = lambda_a
        self.slab_depth = slab_depth
        self.slab_start_step = slab_start_step
        self.stride = stride
        self.random_state = random_state

    def _denoiser_models(self):
        if self.denoisers is None or len(self.denoisers) != len(COUNT_LEVELS):
            raise ValueError(f"denoisers must hold {len(COUNT_LEVELS)} fitted count-level denoisers")
        out = []
        for d in self.denoisers:
            if isinstance(d, CountLevelDenoiser):
                check_is_fitted(d, "model_")
                d = d.model_
            out.append(d)
        return out

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_paired_volumes(X, y, x_ndim=5)
        if X.shape[1] != len(COUNT_LEVELS):
            raise ValueError(f"X must stack {len(COUNT_LEVELS)} count levels on axis 1, got {X.shape[1]}")
        Xt, yt, Xv, yv = _holdout(X, y, X_val, y_val)
        cfg = TrainConfig(stage=2, learning_rate=self.learning_rate, max_steps=self.max_steps,
                          val_every=self.val_every, patience=self.patience, seed=self.random_state,
                          loss=LossConfig(lambda_a=self.lambda_a), gating_filters=self.gating_filters,
                          fusion_filters=self.fusion_filters, slab_depth=self.slab_depth,
                          slab_start_step=self.slab_start_step)
        slab = (self.slab_depth,) + y.shape[2:]
        model = assemble_unn(self._denoiser_models(), slab, self.gating_filters, self.fusion_filters,
                             self.random_state)
        res = fit_unn(model, self._records(Xt, yt, "t"), self._records(Xv, yv, "v"), cfg)
        self.model_ = res.model
        self.curve_ = res.curve
        self.best_val_loss_ = res.best_metric
        self.baseline_val_loss_ = res.extras["baseline_val_loss"]
        return self

    @staticmethod
    def _records(X, y, tag):
        return [{"subject": f"{tag}{i}", "label": y[i], **{f: X[i, j] for j, f in enumerate(COUNT_LEVELS)}}
                for i in range(len(X))]

    def _infer(self, X):
        check_is_fitted(self, "model_")
        X = check_volume_batch(X)
        icfg = InferenceConfig(self.slab_depth, self.stride)
        return [infer_volume(Volume(v), self.model_, icfg) for v in X]

    def predict(self, X) -> np.ndarray:
        return np.stack([r.volume.data for r in self._infer(X)])

    def transform(self, X) -> np.ndarray:
        return np.stack([r.weighted_sum.data for r in self._infer(X)])

    def predict_weights(self, X) -> np.ndarray:
        return np.stack([np.mean(np.stack(r.weights), axis=0) for r in self._infer(X)])

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the fusion output against ``y``."""
        X, y = check_paired_volumes(X, y)
        return float(np.mean([psnr(t, p) for t, p in zip(y, self.predict(X))]))
