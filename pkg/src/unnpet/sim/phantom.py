"""Rasterised torso-like phantoms built from ellipsoids, cylinders and spheres."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..volume import Volume

__all__ = ["Ellipsoid", "Sphere", "PhantomSpec", "PhantomError", "generate_phantom", "torso_template"]


class PhantomError(ValueError):
    """A shape does not fit in the grid or has invalid parameters."""


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid (or elliptic cylinder when ``cylinder``) in voxel coordinates (z, y, x)."""

    center: tuple
    semi_axes: tuple
    intensity: float
    cylinder: bool = False  # ignore z: spans every slice


@dataclass(frozen=True)
class Sphere:
    """Lesion; its value is ``background * contrast``."""

    center: tuple
    radius: float
    contrast: float


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (32, 64, 64)
    voxel_size_mm: tuple = (1.65, 1.65, 1.65)
    background: Ellipsoid | None = None
    organs: tuple = ()
    spheres: tuple = ()
    seed: int = 0
    center_jitter: float = 0.0     # voxels, uniform +-
    intensity_jitter: float = 0.0  # relative, uniform +-
    random_lesions: int = 0        # extra hot spheres placed inside the body
    subject_id: str = ""


def _grid(shape):
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    return z, y, x


def _check_inside(name, center, extent, shape, skip_z=False):
    for ax, (c, r, n) in enumerate(zip(center, extent, shape)):
        if skip_z and ax == 0:
            continue
        if c - r < -0.5 or c + r > n - 0.5:
            raise PhantomError(f"{name} at {tuple(center)} with extent {tuple(extent)} leaves grid {tuple(shape)}")


def _jitter(spec: PhantomSpec, rng: np.random.Generator):
    def move(c):
        if spec.center_jitter <= 0:
            return tuple(c)
        return tuple(float(v) for v in np.asarray(c) + rng.uniform(-spec.center_jitter, spec.center_jitter, 3))

    def scale(v):
        if spec.intensity_jitter <= 0:
            return v
        return float(v * (1.0 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)))

    organs = tuple(replace(o, center=move(o.center), intensity=scale(o.intensity)) for o in spec.organs)
    spheres = tuple(replace(s, center=move(s.center), contrast=scale(s.contrast)) for s in spec.spheres)
    return organs, spheres


def _random_lesions(spec: PhantomSpec, rng: np.random.Generator):
    body = spec.background
    out = []
    for _ in range(spec.random_lesions):
        radius = float(rng.uniform(1.5, 3.0))
        # sample inside the inner 60% of the body cross-section
        ang = rng.uniform(0, 2 * np.pi)
        rad = 0.6 * np.sqrt(rng.uniform(0, 1))
        cy = body.center[1] + rad * body.semi_axes[1] * np.sin(ang)
        cx = body.center[2] + rad * body.semi_axes[2] * np.cos(ang)
        lo, hi = radius + 1, spec.shape[0] - radius - 2
        if hi >= lo:
            cz = rng.uniform(lo, hi)
        else:  # shallow grid: centre the lesion in z and shrink it to fit
            radius = min(radius, spec.shape[0] / 2)
            cz = (spec.shape[0] - 1) / 2
        out.append(Sphere((float(cz), float(cy), float(cx)), radius, float(rng.uniform(3.0, 6.0))))
    return tuple(out)


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Rasterise ``spec`` at voxel centres; later shapes overwrite earlier ones.

    Jitter and random lesions are drawn from ``spec.seed`` only.
    """
    rng = np.random.default_rng(spec.seed)
    organs, spheres = _jitter(spec, rng)
    if spec.background is not None and spec.random_lesions:
        spheres = spheres + _random_lesions(spec, rng)
    z, y, x = _grid(spec.shape)
    img = np.zeros(spec.shape, dtype=np.float64)
    shapes = ([spec.background] if spec.background is not None else []) + list(organs)
    for i, e in enumerate(shapes):
        if e.intensity < 0:
            raise PhantomError("intensities must be non-negative")
        _check_inside(f"ellipsoid {i}", e.center, e.semi_axes, spec.shape, skip_z=e.cylinder)
        r2 = ((y - e.center[1]) / e.semi_axes[1]) ** 2 + ((x - e.center[2]) / e.semi_axes[2]) ** 2
        if not e.cylinder:
            r2 = r2 + ((z - e.center[0]) / e.semi_axes[0]) ** 2
        img[r2 <= 1.0] = e.intensity
    bg = spec.background.intensity if spec.background is not None else 1.0
    for i, s in enumerate(spheres):
        if s.radius <= 0 or s.contrast < 0:
            raise PhantomError(f"sphere {i}: radius must be positive and contrast non-negative")
        _check_inside(f"sphere {i}", s.center, (s.radius,) * 3, spec.shape)
        r2 = (z - s.center[0]) ** 2 + (y - s.center[1]) ** 2 + (x - s.center[2]) ** 2
        img[r2 <= s.radius ** 2] = bg * s.contrast
    return Volume(img.astype(np.float32), spec.voxel_size_mm, 1.0, spec.subject_id)


def torso_template(shape=(32, 64, 64), voxel_size_mm=(1.65, 1.65, 1.65)) -> PhantomSpec:
    """Body cylinder with liver, lungs, heart and a couple of lesions, scaled to ``shape``."""
    d, h, w = shape
    cz, cy, cx = (d - 1) / 2, (h - 1) / 2, (w - 1) / 2
    sy, sx = 0.40 * h, 0.44 * w
    body = Ellipsoid((cz, cy, cx), (d, sy, sx), 1.0, cylinder=True)
    organs = (
        Ellipsoid((cz, cy + 0.06 * h, cx - 0.17 * w), (0.35 * d, 0.16 * h, 0.15 * w), 2.0),   # liver
        Ellipsoid((cz, cy - 0.08 * h, cx + 0.20 * w), (0.40 * d, 0.14 * h, 0.10 * w), 0.3),   # lung
        Ellipsoid((cz, cy - 0.10 * h, cx - 0.02 * w), (0.30 * d, 0.09 * h, 0.08 * w), 3.0),   # heart
        Ellipsoid((cz, cy + 0.28 * h, cx), (d, 0.05 * h, 0.05 * w), 0.6, cylinder=True),     # spine
    )
    spheres = (
        Sphere((cz, cy + 0.10 * h, cx + 0.15 * w), 0.04 * w, 4.0),
        Sphere((cz + 0.2 * d, cy - 0.15 * h, cx + 0.05 * w), 0.03 * w, 0.2),
    )
    return PhantomSpec(tuple(shape), tuple(voxel_size_mm), body, organs, spheres)
