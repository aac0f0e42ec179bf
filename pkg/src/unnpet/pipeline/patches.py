from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PatchBatch", "extract_patches", "random_corner"]


@dataclass
class PatchBatch:
    inputs: np.ndarray   # (n, 1, D, H, W)
    labels: np.ndarray   # (n, 1, D, H, W)
    corners: list        # (source index, (z, y, x)) per patch


def random_corner(vol_shape, patch_shape, rng: np.random.Generator) -> tuple[int, int, int]:
    for ax, (n, p) in enumerate(zip(vol_shape, patch_shape)):
        if p > n:
            raise ValueError(f"patch {tuple(patch_shape)} larger than volume {tuple(vol_shape)} on axis {ax}")
    return tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(vol_shape, patch_shape))


def extract_patches(inputs, labels, patch_shape, n_patches: int, seed) -> PatchBatch:
    """Crop ``n_patches`` paired patches at uniformly random corners.

    ``inputs``/``labels`` are one volume each or equal-length sequences of
    volumes; sources are then drawn uniformly too.
    """
    if isinstance(inputs, np.ndarray) and inputs.ndim == 3:
        inputs, labels = [inputs], [labels]
    inputs = [np.asarray(v) for v in inputs]
    labels = [np.asarray(v) for v in labels]
    if len(inputs) != len(labels) or not inputs:
        raise ValueError("need the same non-zero number of input and label volumes")
    for a, b in zip(inputs, labels):
        if a.shape != b.shape:
            raise ValueError(f"input {a.shape} and label {b.shape} shapes differ")
    patch_shape = tuple(int(p) for p in patch_shape)
    rng = np.random.default_rng(seed)
    xs, ys, corners = [], [], []
    for _ in range(n_patches):
        src = int(rng.integers(0, len(inputs)))
        z, y, x = random_corner(inputs[src].shape, patch_shape, rng)
        sl = (slice(z, z + patch_shape[0]), slice(y, y + patch_shape[1]), slice(x, x + patch_shape[2]))
        xs.append(inputs[src][sl])
        ys.append(labels[src][sl])
        corners.append((src, (z, y, x)))
    return PatchBatch(np.stack(xs)[:, None].astype(np.float32), np.stack(ys)[:, None].astype(np.float32), corners)
