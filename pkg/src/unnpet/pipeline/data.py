from __future__ import annotations

import logging

import numpy as np

from ..models import COUNT_LEVELS
from ..volume import DatasetManifest

logger = logging.getLogger(__name__)

__all__ = ["split_subjects", "load_level_pairs", "load_subject_levels", "match_level"]


def match_level(f: float, levels=COUNT_LEVELS) -> float:
    for lv in levels:
        if abs(lv - f) < 1e-9:
            return lv
    raise ValueError(f"count level {f:g} is not one of {tuple(levels)}")


def split_subjects(manifest: DatasetManifest, n_train: int, n_val: int, n_test: int) -> dict[str, DatasetManifest]:
    """Consecutive train/val/test split in manifest subject order."""
    subs = manifest.subjects()
    need = n_train + n_val + n_test
    if need > len(subs):
        raise ValueError(f"split needs {need} subjects, manifest has {len(subs)}")
    cuts = {"train": subs[:n_train], "val": subs[n_train:n_train + n_val],
            "test": subs[n_train + n_val:need]}
    return {k: manifest.subset(v) for k, v in cuts.items()}


def load_level_pairs(manifest: DatasetManifest, count_level: float) -> tuple[list, list, list]:
    """(inputs, labels, subject ids) for every subject with both volumes present."""
    xs, ys, ids = [], [], []
    for s in manifest.subjects():
        if manifest.find(s, count_level) is None or manifest.find(s, role="label") is None:
            logger.warning("subject %s lacks count level %g or its label; skipped", s, count_level)
            continue
        xs.append(np.asarray(manifest.load(s, count_level).data, dtype=np.float32))
        ys.append(np.asarray(manifest.load(s, role="label").data, dtype=np.float32))
        ids.append(s)
    return xs, ys, ids


def load_subject_levels(manifest: DatasetManifest, levels=COUNT_LEVELS) -> list[dict]:
    """One dict per complete subject: ``{"subject", "label", f: input for f in levels}``."""
    out = []
    for s in manifest.subjects():
        missing = [f for f in levels if manifest.find(s, f) is None]
        if missing or manifest.find(s, role="label") is None:
            logger.warning("subject %s incomplete (missing levels %s); skipped", s, missing)
            continue
        rec = {"subject": s, "label": np.asarray(manifest.load(s, role="label").data, dtype=np.float32)}
        for f in levels:
            rec[f] = np.asarray(manifest.load(s, f).data, dtype=np.float32)
        out.append(rec)
    return out
