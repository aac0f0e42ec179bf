"""Slab-wise inference with overlap averaging along the slice axis."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..models import UnnModel, UnnOutput
from ..tensor import Tensor, no_grad
from ..volume import Volume
from .config import InferenceConfig
from .training import slab_starts

__all__ = ["InferenceResult", "infer_volume", "infer_all", "coverage_counts"]


@dataclass
class InferenceResult:
    volume: Volume
    weights: list = field(default_factory=list)         # per-slab weight vectors (UNN only)
    weighted_sum: Volume | None = None                  # stitched I_ws (UNN only)
    starts: list = field(default_factory=list)
    coverage: np.ndarray | None = None

    def __iter__(self):
        yield self.volume
        yield self.weights


def coverage_counts(depth: int, icfg: InferenceConfig) -> tuple[list[int], np.ndarray]:
    starts = slab_starts(depth, icfg.patch_depth, icfg.stride)
    cov = np.zeros(depth, dtype=np.int64)
    for s in starts:
        cov[s:s + icfg.patch_depth] += 1
    return starts, cov


def _as_array(out) -> np.ndarray:
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def _run_slabs(fn, data: np.ndarray, starts, depth: int, jobs: int):
    def one(s):
        with no_grad():
            return fn(data[s:s + depth][None, None])
    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(one, starts))
    return [one(s) for s in starts]


def _stitch(parts, starts, cov, shape, depth) -> np.ndarray:
    acc = np.zeros(shape, dtype=np.float64)
    for s, p in zip(starts, parts):
        acc[s:s + depth] += np.asarray(p, dtype=np.float64).reshape((depth,) + shape[1:])
    return (acc / cov[:, None, None]).astype(np.float32)


def _model_dtype(model):
    if hasattr(model, "parameters"):
        ps = model.parameters()
        if ps:
            return ps[0].dtype
    return np.float32


def infer_volume(volume: Volume, model, icfg: InferenceConfig = InferenceConfig(), jobs: int = 1) -> InferenceResult:
    """Run ``model`` on overlapping slabs and average the overlaps.

    ``model`` is a ``UnnModel`` or any callable mapping an ``N x 1 x D x H x W``
    tensor to a tensor of the same shape (a single denoiser, or a test double).
    Unpacks as ``(volume, weights)``.
    """
    data = np.asarray(volume.data)
    depth = icfg.patch_depth
    if data.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {data.shape}")
    if data.shape[0] < depth:
        raise ValueError(f"volume depth {data.shape[0]} is smaller than the patch depth {depth}")
    starts, cov = coverage_counts(data.shape[0], icfg)
    dtype = _model_dtype(model)
    if isinstance(model, UnnModel):
        outs: list[UnnOutput] = _run_slabs(lambda x: model(Tensor(x.astype(dtype))), data, starts, depth, jobs)
        out = _stitch([o.out.data for o in outs], starts, cov, data.shape, depth)
        ws = _stitch([o.weighted_sum.data for o in outs], starts, cov, data.shape, depth)
        weights = [o.weights.data[0].astype(np.float64) for o in outs]
        return InferenceResult(volume.replace(out), weights, volume.replace(ws), starts, cov)
    parts = _run_slabs(lambda x: _as_array(model(Tensor(x.astype(dtype)))), data, starts, depth, jobs)
    return InferenceResult(volume.replace(_stitch(parts, starts, cov, data.shape, depth)), [], None, starts, cov)


def infer_all(volume: Volume, model: UnnModel, icfg: InferenceConfig = InferenceConfig(), jobs: int = 1) -> dict:
    """Every denoiser's stitched output plus the UNN outputs, sharing one denoiser pass per slab.

    Returns ``{"denoised": [Volume x 6], "out": Volume, "weighted_sum": Volume, "weights": [...]}``.
    """
    data = np.asarray(volume.data)
    depth = icfg.patch_depth
    if data.shape[0] < depth:
        raise ValueError(f"volume depth {data.shape[0]} is smaller than the patch depth {depth}")
    starts, cov = coverage_counts(data.shape[0], icfg)
    dtype = _model_dtype(model)

    def one(x):
        xt = Tensor(x.astype(dtype))
        den = [d(xt).data for d in model.denoisers]
        o = model(xt, denoised=den)
        return den, o.out.data, o.weighted_sum.data, o.weights.data[0].astype(np.float64)

    res = _run_slabs(one, data, starts, depth, jobs)
    n = len(model.denoisers)
    return {
        "denoised": [volume.replace(_stitch([r[0][i] for r in res], starts, cov, data.shape, depth))
                     for i in range(n)],
        "out": volume.replace(_stitch([r[1] for r in res], starts, cov, data.shape, depth)),
        "weighted_sum": volume.replace(_stitch([r[2] for r in res], starts, cov, data.shape, depth)),
        "weights": [r[3] for r in res],
    }
