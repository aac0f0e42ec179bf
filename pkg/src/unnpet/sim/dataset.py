"""Multi-count-level synthetic dataset: phantom -> counts -> thinning -> OSEM."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..models import COUNT_LEVELS
from ..volume import DatasetManifest, ManifestEntry, Volume, write_volume
from .phantom import PhantomSpec, generate_phantom, torso_template
from .projector import forward_project
from .recon import ReconConfig, osem_reconstruct, poisson_sample, thin_counts

logger = logging.getLogger(__name__)

__all__ = ["SimConfig", "simulate_subject", "build_dataset", "subject_spec", "level_tag"]


@dataclass(frozen=True)
class SimConfig:
    n_angles: int = 60
    n_bins: int | None = None
    total_counts: float = 2e6
    recon: ReconConfig = field(default_factory=ReconConfig)
    count_levels: tuple = COUNT_LEVELS
    center_jitter: float = 2.0
    intensity_jitter: float = 0.25
    random_lesions: int = 2


def level_tag(f: float) -> str:
    return f"{int(round(f * 1000)):04d}"


def subject_spec(template: PhantomSpec, cfg: SimConfig, seed: int, index: int) -> PhantomSpec:
    sub_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    return replace(template, seed=sub_seed, subject_id=f"sub{index:03d}",
                   center_jitter=cfg.center_jitter, intensity_jitter=cfg.intensity_jitter,
                   random_lesions=cfg.random_lesions)


def simulate_subject(spec: PhantomSpec, cfg: SimConfig) -> dict[float, Volume]:
    """Reconstructions at full count (key 1.0) and every level in ``cfg.count_levels``."""
    ss = np.random.SeedSequence([spec.seed, 7])
    count_seed, *thin_seeds = ss.spawn(1 + len(cfg.count_levels))
    phantom = generate_phantom(spec)
    expected = forward_project(phantom, cfg.n_angles, cfg.n_bins)
    full = poisson_sample(expected, cfg.total_counts, count_seed)
    out = {}
    for f, ts in zip((1.0,) + tuple(cfg.count_levels), [None] + thin_seeds):
        sino = full if f == 1.0 else thin_counts(full, f, ts)
        vol = osem_reconstruct(sino, cfg.recon, spec.voxel_size_mm, subject_id=spec.subject_id)
        vol.count_level = f
        out[f] = vol
    return out


def build_dataset(n_subjects: int, template: PhantomSpec | None, cfg: SimConfig, seed: int, out_dir,
                  jobs: int = 1) -> DatasetManifest:
    """Simulate ``n_subjects`` subjects and write volumes plus ``manifest.csv`` to ``out_dir``.

    The manifest is written last, so a failed run never leaves one behind.
    """
    out_dir = Path(out_dir)
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    template = template or torso_template()

    def work(i):
        spec = subject_spec(template, cfg, seed, i)
        vols = simulate_subject(spec, cfg)
        rows = []
        for f, vol in vols.items():
            role = "label" if f == 1.0 else "input"
            name = f"{spec.subject_id}_{level_tag(f)}"
            write_volume(out_dir / name, vol)
            rows.append(ManifestEntry(spec.subject_id, f, f"{name}.hdr", role))
        logger.info("simulated %s", spec.subject_id)
        return rows

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            per_subject = list(pool.map(work, range(n_subjects)))
    else:
        per_subject = [work(i) for i in range(n_subjects)]
    manifest = DatasetManifest([e for rows in per_subject for e in rows], out_dir)
    manifest.save(out_dir / "manifest.csv")
    return manifest
