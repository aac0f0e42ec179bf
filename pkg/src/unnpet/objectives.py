"""Training losses (MAE, SSIM, composite, stage-2) and evaluation metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from .tensor import Tensor, absolute, as_tensor, box_mean2d, mean, transpose

__all__ = [
    "SsimParams",
    "LossConfig",
    "MetricReport",
    "mae_loss",
    "ssim_map",
    "ssim_3axis",
    "composite_loss",
    "stage2_loss",
    "psnr",
    "nrmse",
    "write_metric_rows",
    "read_metric_rows",
]

AXIS_NAMES = ("axial", "coronal", "sagittal")


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    k1: float = 0.01
    k2: float = 0.03

    def constants(self, data_range: float) -> tuple[float, float]:
        if not data_range > 0:
            raise ValueError(f"SSIM dynamic range must be positive, got {data_range}")
        return (self.k1 * data_range) ** 2, (self.k2 * data_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    lambda_a: float = 0.6
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if self.lambda_a < 0:
            raise ValueError("lambda_a must be non-negative")


def _check_same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mae_loss(Y, X) -> Tensor:
    """Mean absolute error over batch and voxels."""
    Y, X = as_tensor(Y), as_tensor(X)
    _check_same_shape(Y, X, "mae_loss")
    return mean(absolute(Y - X))


def _ssim_windows(y: Tensor, x: Tensor, c1, c2, k: int) -> Tensor:
    """Per-window SSIM over the last two axes (valid k x k windows)."""
    mu_y = box_mean2d(y, k)
    mu_x = box_mean2d(x, k)
    e_yy = box_mean2d(y * y, k)
    e_xx = box_mean2d(x * x, k)
    e_yx = box_mean2d(y * x, k)
    mu_yy = mu_y * mu_y
    mu_xx = mu_x * mu_x
    mu_yx = mu_y * mu_x
    var_y = e_yy - mu_yy
    var_x = e_xx - mu_xx
    cov = e_yx - mu_yx
    num = (2.0 * mu_yx + c1) * (2.0 * cov + c2)
    den = (mu_yy + mu_xx + c1) * (var_y + var_x + c2)
    return num / den


def ssim_map(Y, X, params: SsimParams = SsimParams(), data_range: float | None = None) -> Tensor:
    """Mean SSIM over all valid sliding windows of 2-D slices.

    ``Y`` is the reference. Leading axes are treated as a stack of slices and
    averaged. ``data_range`` defaults to ``max(Y)``.
    """
    Y, X = as_tensor(Y), as_tensor(X)
    _check_same_shape(Y, X, "ssim_map")
    if Y.ndim < 2:
        raise ValueError("ssim_map needs at least 2-D input")
    h, w = Y.shape[-2:]
    if h < params.window or w < params.window:
        raise ValueError(f"slice {h}x{w} is smaller than the {params.window}x{params.window} SSIM window")
    if data_range is None:
        data_range = float(Y.data.max())
    c1, c2 = params.constants(data_range)
    return mean(_ssim_windows(Y, X, c1, c2, params.window))


def _per_sample_constants(Y: Tensor, params: SsimParams):
    ranges = Y.data.reshape(Y.shape[0], -1).max(axis=1).astype(np.float64)
    if np.any(ranges <= 0):
        raise ValueError("SSIM dynamic range (max of reference) must be positive for every sample")
    shape = (Y.shape[0],) + (1,) * (Y.ndim - 1)
    c1 = ((params.k1 * ranges) ** 2).reshape(shape).astype(Y.dtype)
    c2 = ((params.k2 * ranges) ** 2).reshape(shape).astype(Y.dtype)
    return c1, c2


# permutations of (N, C, D, H, W) that bring each slicing plane to the last two axes
_AXIS_PERMUTATIONS = {
    "axial": (0, 1, 2, 3, 4),      # planes H x W, one per z
    "coronal": (0, 1, 3, 2, 4),    # planes D x W, one per y
    "sagittal": (0, 1, 4, 2, 3),   # planes D x H, one per x
}


def ssim_per_axis(Y, X, params: SsimParams = SsimParams()) -> dict[str, Tensor]:
    Y, X = as_tensor(Y), as_tensor(X)
    _check_same_shape(Y, X, "ssim_3axis")
    if Y.ndim != 5:
        raise ValueError(f"ssim_3axis expects N x C x D x H x W volumes, got {Y.shape}")
    k = params.window
    for name, perm in _AXIS_PERMUTATIONS.items():
        plane = (Y.shape[perm[3]], Y.shape[perm[4]])
        if min(plane) < k:
            raise ValueError(f"{name} slices are {plane[0]}x{plane[1]}, smaller than the {k}x{k} SSIM window")
    c1, c2 = _per_sample_constants(Y, params)
    out = {}
    for name, perm in _AXIS_PERMUTATIONS.items():
        if perm == (0, 1, 2, 3, 4):
            y, x = Y, X
        else:
            y, x = transpose(Y, perm), transpose(X, perm)
        out[name] = mean(_ssim_windows(y, x, c1, c2, k))
    return out


def ssim_3axis(Y, X, params: SsimParams = SsimParams()) -> Tensor:
    """SSIM averaged over axial, coronal and sagittal slicings.

    The dynamic range is the per-sample maximum of the reference ``Y``.
    """
    per_axis = ssim_per_axis(Y, X, params)
    a, c, s = (per_axis[n] for n in AXIS_NAMES)
    return (a + c + s) / 3.0


def composite_loss(I, I_hat, cfg: LossConfig = LossConfig()) -> Tensor:
    """MAE plus ``lambda_a`` times the SSIM loss ``1 - ssim_3axis``."""
    I, I_hat = as_tensor(I), as_tensor(I_hat)
    _check_same_shape(I, I_hat, "composite_loss")
    return mae_loss(I, I_hat) + cfg.lambda_a * (1.0 - ssim_3axis(I, I_hat, cfg.ssim))


def stage2_loss(I, I_out, I_ws, cfg: LossConfig = LossConfig()) -> Tensor:
    """Composite loss on the fusion output plus the same loss on the weighted sum."""
    return composite_loss(I, I_out, cfg) + composite_loss(I, I_ws, cfg)


# -- evaluation metrics ---------------------------------------------------------

def _as_f64(v) -> np.ndarray:
    if isinstance(v, Tensor):
        v = v.data
    return np.asarray(v, dtype=np.float64)


def psnr(reference, test) -> float:
    """10 log10(max(reference)^2 / MSE) over the whole volume; ``inf`` if identical."""
    ref, tst = _as_f64(reference), _as_f64(test)
    _check_same_shape(ref, tst, "psnr")
    peak = ref.max()
    if not np.any(ref):
        raise ValueError("psnr: reference volume is all zero")
    mse = np.mean((tst - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak ** 2 / mse))


def nrmse(reference, test) -> float:
    """||test - reference||_2 / ||reference||_2 over the whole volume."""
    ref, tst = _as_f64(reference), _as_f64(test)
    _check_same_shape(ref, tst, "nrmse")
    norm = np.linalg.norm(ref.ravel())
    if norm == 0:
        raise ValueError("nrmse: reference volume has zero norm")
    return float(np.linalg.norm((tst - ref).ravel()) / norm)


@dataclass
class MetricReport:
    subject: str
    count_level: float
    method: str
    psnr_db: float
    nrmse: float

    def __post_init__(self):
        if self.nrmse < 0:
            raise ValueError("nrmse must be non-negative")


_METRIC_COLUMNS = [f.name for f in fields(MetricReport)]


def write_metric_rows(rows: Iterable[MetricReport], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=_METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        d = asdict(row)
        d["psnr_db"] = repr(float(d["psnr_db"]))
        d["nrmse"] = repr(float(d["nrmse"]))
        d["count_level"] = f"{d['count_level']:g}"
        writer.writerow(d)


def read_metric_rows(fh) -> list[MetricReport]:
    return [
        MetricReport(r["subject"], float(r["count_level"]), r["method"], float(r["psnr_db"]), float(r["nrmse"]))
        for r in csv.DictReader(fh)
    ]
