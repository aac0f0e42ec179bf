"""Count statistics, OSEM reconstruction and Gaussian post-filtering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from ..volume import Volume
from .projector import GeometryError, Sinogram, get_projector

__all__ = [
    "ReconConfig",
    "poisson_sample",
    "thin_counts",
    "osem_reconstruct",
    "gaussian_postfilter",
    "fwhm_to_sigma_voxels",
]

# bins whose modelled projection falls below this contribute nothing to the update
PROJECTION_FLOOR = 1e-12


@dataclass(frozen=True)
class ReconConfig:
    iterations: int = 6
    subsets: int = 5
    postfilter_fwhm_mm: float = 5.0

    def __post_init__(self):
        if self.iterations < 1 or self.subsets < 1:
            raise ValueError("iterations and subsets must be >= 1")
        if self.postfilter_fwhm_mm < 0:
            raise ValueError("postfilter FWHM must be non-negative")


def poisson_sample(expected: Sinogram, total_counts_target: float, seed) -> Sinogram:
    """Scale ``expected`` to ``total_counts_target`` counts and draw Poisson counts per bin."""
    if total_counts_target <= 0:
        raise ValueError("total_counts_target must be positive")
    mean = np.asarray(expected.counts, dtype=np.float64)
    if np.any(mean < 0):
        raise ValueError("expected sinogram has negative entries")
    mass = mean.sum()
    if mass <= 0:
        raise ValueError("cannot sample counts from a zero-mass sinogram")
    factor = total_counts_target / mass
    rng = np.random.default_rng(seed)
    counts = rng.poisson(mean * factor).astype(np.int64)
    return Sinogram(counts, expected.scale * factor, expected.count_fraction, expected.image_shape)


def thin_counts(full: Sinogram, fraction: float, seed) -> Sinogram:
    """Keep each detected event independently with probability ``fraction`` (binomial thinning)."""
    if not full.is_integer:
        raise TypeError("thin_counts needs integer counts; run poisson_sample first")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if fraction == 1.0:
        counts = full.counts.copy()
    else:
        rng = np.random.default_rng(seed)
        counts = rng.binomial(full.counts, fraction).astype(np.int64)
    return Sinogram(counts, full.scale, full.count_fraction * fraction, full.image_shape)


def fwhm_to_sigma_voxels(fwhm_mm: float, voxel_size_mm) -> tuple[float, ...]:
    k = 2.0 * np.sqrt(2.0 * np.log(2.0))
    return tuple(fwhm_mm / k / v for v in voxel_size_mm)


def gaussian_postfilter(v: Volume, fwhm_mm: float) -> Volume:
    """Separable Gaussian blur with reflective boundaries; ``fwhm_mm=0`` is the identity."""
    if fwhm_mm < 0:
        raise ValueError("FWHM must be non-negative")
    if fwhm_mm == 0:
        return v.replace(v.data.copy())
    sigma = fwhm_to_sigma_voxels(fwhm_mm, v.voxel_size_mm)
    out = gaussian_filter(np.asarray(v.data, dtype=np.float64), sigma, mode="reflect")
    return v.replace(out.astype(np.float32))


def osem_reconstruct(
    s: Sinogram,
    cfg: ReconConfig = ReconConfig(),
    voxel_size_mm=(1.65, 1.65, 1.65),
    *,
    subject_id: str = "",
    postfilter: bool = True,
    callback: Callable[[int, int, np.ndarray], None] | None = None,
) -> Volume:
    """Ordered-subset EM followed by the Gaussian post-filter.

    The image is returned in activity units: the count scale and thinning
    fraction recorded on the sinogram are divided out, so every count level
    reconstructs to the same mean intensity. ``callback(iteration, subset, x)``
    sees the raw estimate after each sub-update.
    """
    y = np.asarray(s.counts, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("sinogram counts must be non-negative")
    n_angles, n_bins, depth = y.shape
    if n_angles % cfg.subsets:
        raise GeometryError(f"{cfg.subsets} subsets do not divide {n_angles} angles")
    if len(s.image_shape) != 3:
        raise GeometryError("sinogram does not record its image shape")
    proj = get_projector(tuple(s.image_shape[1:]), n_angles, n_bins)
    x = np.ones(s.image_shape, dtype=np.float64)
    sens = []
    for k in range(cfg.subsets):
        a = proj.subset_matrix(k, cfg.subsets)
        sens.append(proj.backproject(np.ones((a.shape[0] // n_bins, n_bins, depth)), a))
    for it in range(cfg.iterations):
        for k in range(cfg.subsets):
            a = proj.subset_matrix(k, cfg.subsets)
            ys = y[proj.subset_angles(k, cfg.subsets)]
            model = proj.project(x, a)
            ratio = np.zeros_like(model)
            ok = model > PROJECTION_FLOOR
            ratio[ok] = ys[ok] / model[ok]
            back = proj.backproject(ratio, a)
            sk = sens[k]
            upd = np.zeros_like(x)
            np.divide(back, sk, out=upd, where=sk > 0)
            x = x * upd
            if callback is not None:
                callback(it, k, x)
    denom = s.scale * s.count_fraction
    if denom <= 0:
        raise ValueError("sinogram scale and count fraction must be positive to reconstruct")
    vol = Volume((x / denom).astype(np.float32), voxel_size_mm, min(1.0, max(s.count_fraction, 1e-12)), subject_id)
    if postfilter:
        vol = gaussian_postfilter(vol, cfg.postfilter_fwhm_mm)
    return vol
