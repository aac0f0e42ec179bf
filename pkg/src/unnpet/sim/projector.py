"""Parallel-beam line-integral projector stored as a sparse system matrix.

Rays are sampled every half voxel and each sample is spread bilinearly onto the
four neighbouring pixels, so the back projector is the exact transpose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from ..volume import Volume

__all__ = ["ParallelBeamProjector", "Sinogram", "GeometryError", "forward_project", "get_projector"]


class GeometryError(ValueError):
    """Projector geometry cannot be built (no angles, no bins, empty image)."""


@dataclass
class Sinogram:
    """Per-slice projections, shape (angles, bins, slices).

    ``scale`` converts image units to expected counts; ``count_fraction``
    records thinning applied so far.
    """

    counts: np.ndarray
    scale: float = 1.0
    count_fraction: float = 1.0
    image_shape: tuple = field(default=())

    @property
    def n_angles(self) -> int:
        return self.counts.shape[0]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[1]

    @property
    def is_integer(self) -> bool:
        return np.issubdtype(self.counts.dtype, np.integer)


class ParallelBeamProjector:
    """Line integrals over angles in [0, pi) for an H x W slice grid.

    Projection/back projection act on stacks of slices: images (D, H, W),
    sinograms (angles, bins, D).
    """

    def __init__(self, image_shape, n_angles: int, n_bins: int | None = None, step: float = 0.5):
        h, w = (int(v) for v in image_shape)
        if n_angles < 1 or h < 1 or w < 1:
            raise GeometryError(f"degenerate geometry: image {image_shape}, {n_angles} angles")
        if n_bins is None:
            n_bins = int(np.ceil(np.hypot(h, w)))
        if n_bins < 1:
            raise GeometryError("need at least one detector bin")
        self.image_shape = (h, w)
        self.n_angles, self.n_bins, self.step = int(n_angles), int(n_bins), float(step)
        self.angles = np.arange(n_angles) * np.pi / n_angles
        self.matrix = self._build().tocsr()
        self._subset_cache: dict[tuple[int, int], sp.csr_matrix] = {}

    def _build(self) -> sp.coo_matrix:
        h, w = self.image_shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        half = 0.5 * np.hypot(h, w) + 1.0
        s = np.arange(-half, half + 1e-9, self.step)
        t = (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0)
        rows, cols, vals = [], [], []
        for a, theta in enumerate(self.angles):
            c, sn = np.cos(theta), np.sin(theta)
            # ray j: points t_j * (cos, sin) + s * (-sin, cos) around the image centre
            px = cx + t[:, None] * c - s[None, :] * sn
            py = cy + t[:, None] * sn + s[None, :] * c
            x0, y0 = np.floor(px), np.floor(py)
            fx, fy = px - x0, py - y0
            ray = np.broadcast_to((a * self.n_bins + np.arange(self.n_bins))[:, None], px.shape)
            for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                               (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
                yy, xx = y0 + dy, x0 + dx
                ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wt > 0)
                rows.append(ray[ok])
                cols.append((yy[ok] * w + xx[ok]).astype(np.int64))
                vals.append(wt[ok] * self.step)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return sp.coo_matrix((vals, (rows, cols)), shape=(self.n_angles * self.n_bins, h * w))

    # subsets interleave angles: subset k holds angles k, k+S, k+2S, ...
    def subset_angles(self, k: int, n_subsets: int) -> np.ndarray:
        return np.arange(k, self.n_angles, n_subsets)

    def subset_matrix(self, k: int, n_subsets: int) -> sp.csr_matrix:
        key = (k, n_subsets)
        if key not in self._subset_cache:
            rows = (self.subset_angles(k, n_subsets)[:, None] * self.n_bins + np.arange(self.n_bins)).ravel()
            self._subset_cache[key] = self.matrix[rows]
        return self._subset_cache[key]

    def project(self, image: np.ndarray, matrix: sp.csr_matrix | None = None) -> np.ndarray:
        """(D, H, W) -> (angles, bins, D)."""
        img = np.asarray(image, dtype=np.float64)
        if img.shape[1:] != self.image_shape:
            raise GeometryError(f"image slices {img.shape[1:]} do not match projector {self.image_shape}")
        a = self.matrix if matrix is None else matrix
        flat = a @ img.reshape(img.shape[0], -1).T
        return flat.reshape(-1, self.n_bins, img.shape[0])

    def backproject(self, sino: np.ndarray, matrix: sp.csr_matrix | None = None) -> np.ndarray:
        """(angles, bins, D) -> (D, H, W); exact transpose of :meth:`project`."""
        y = np.asarray(sino, dtype=np.float64)
        a = self.matrix if matrix is None else matrix
        flat = a.T @ y.reshape(-1, y.shape[-1])
        return flat.T.reshape((y.shape[-1],) + self.image_shape)


@lru_cache(maxsize=8)
def get_projector(image_shape: tuple, n_angles: int, n_bins: int | None) -> ParallelBeamProjector:
    return ParallelBeamProjector(image_shape, n_angles, n_bins)


def forward_project(v: Volume | np.ndarray, n_angles: int, n_bins: int | None = None) -> Sinogram:
    """Expected (noise-free) sinogram of a volume, one 2-D projection per slice."""
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    if data.ndim != 3:
        raise GeometryError(f"expected a (D, H, W) volume, got shape {data.shape}")
    proj = get_projector(tuple(data.shape[1:]), int(n_angles), n_bins)
    return Sinogram(proj.project(data), image_shape=tuple(data.shape))
