"""Test-split metrics and per-subject gating weights."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..models import COUNT_LEVELS, UnnModel, level_name
from ..objectives import MetricReport, nrmse, psnr, write_metric_rows
from ..volume import DatasetManifest, atomic_write_text
from .config import InferenceConfig
from .inference import infer_all, infer_volume

logger = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "MEAN_SUBJECT",
    "STD_SUBJECT",
    "evaluate",
    "mean_rows",
    "format_table",
    "report_weights",
    "weight_spread",
    "read_weight_rows",
]

METHODS = ("input",) + tuple(level_name(f) for f in COUNT_LEVELS) + ("UNN_ws", "UNN_out")
MEAN_SUBJECT = "mean"
STD_SUBJECT = "std"


def _subject_metrics(manifest, subject, model, denoisers, icfg, levels, jobs) -> list[MetricReport]:
    label = manifest.load(subject, role="label")
    rows = []
    for f in levels:
        if manifest.find(subject, f) is None:
            logger.warning("subject %s has no count level %g volume; skipped", subject, f)
            continue
        x = manifest.load(subject, f)
        outs = {"input": x.data}
        if model is not None:
            r = infer_all(x, model, icfg, jobs)
            for g, v in zip(COUNT_LEVELS, r["denoised"]):
                outs[level_name(g)] = v.data
            outs["UNN_ws"] = r["weighted_sum"].data
            outs["UNN_out"] = r["out"].data
        elif denoisers:
            for g, d in zip(COUNT_LEVELS, denoisers):
                if d is not None:
                    outs[level_name(g)] = infer_volume(x, d, icfg, jobs).volume.data
        for m in METHODS:
            if m in outs:
                rows.append(MetricReport(subject, f, m, psnr(label.data, outs[m]), nrmse(label.data, outs[m])))
    return rows


def mean_rows(rows: list[MetricReport]) -> list[MetricReport]:
    """Mean PSNR/NRMSE per (method, count level) across subjects, rows ordered input, Net_1..Net_50, UNN_ws, UNN_out."""
    out = []
    for m in METHODS:
        for f in COUNT_LEVELS:
            cell = [r for r in rows if r.method == m and abs(r.count_level - f) < 1e-9 and r.subject != MEAN_SUBJECT]
            if cell:
                out.append(MetricReport(MEAN_SUBJECT, f, m, float(np.mean([r.psnr_db for r in cell])),
                                        float(np.mean([r.nrmse for r in cell]))))
    return out


def evaluate(manifest: DatasetManifest, model: UnnModel | None = None, denoisers=None, out_csv=None,
             icfg: InferenceConfig = InferenceConfig(), jobs: int = 1, levels=COUNT_LEVELS) -> list[MetricReport]:
    """PSNR and NRMSE against the full-count label for every subject, level and method.

    With a UNN model the six denoisers come from it; otherwise ``denoisers`` is
    an optional list of six single-level models (``None`` entries skipped).
    Returns per-subject rows followed by the per-cell mean rows.
    """
    subjects = []
    for s in manifest.subjects():
        if manifest.find(s, role="label") is None:
            logger.warning("subject %s has no full-count label; skipped", s)
        else:
            subjects.append(s)
    if not subjects:
        raise ValueError("no subject with a full-count label to evaluate")
    if model is not None:
        per = [_subject_metrics(manifest, s, model, None, icfg, levels, 1) for s in subjects] if jobs <= 1 else None
        if per is None:
            with ThreadPoolExecutor(jobs) as pool:
                per = list(pool.map(lambda s: _subject_metrics(manifest, s, model, None, icfg, levels, 1), subjects))
    else:
        per = [_subject_metrics(manifest, s, None, denoisers, icfg, levels, jobs) for s in subjects]
    rows = [r for p in per for r in p]
    if not rows:
        raise ValueError("evaluation produced no rows")
    rows += mean_rows(rows)
    if out_csv is not None:
        buf = io.StringIO()
        write_metric_rows(rows, buf)
        atomic_write_text(out_csv, buf.getvalue())
    return rows


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def format_table(rows: list[MetricReport]) -> str:
    """Method x count-level grid of mean PSNR / NRMSE (4 decimals)."""
    means = [r for r in rows if r.subject == MEAN_SUBJECT] or mean_rows(rows)
    levels = [f for f in COUNT_LEVELS if any(abs(r.count_level - f) < 1e-9 for r in means)]
    head = ["method"] + [f"{int(round(f * 100))}%" for f in levels]
    lines = ["PSNR (dB) / NRMSE", "\t".join(head)]
    for m in METHODS:
        cells = []
        for f in levels:
            hit = [r for r in means if r.method == m and abs(r.count_level - f) < 1e-9]
            cells.append(f"{_fmt(hit[0].psnr_db)}/{_fmt(hit[0].nrmse)}" if hit else "-")
        if any(c != "-" for c in cells):
            lines.append("\t".join([m] + cells))
    return "\n".join(lines)


# -- gating weights ---------------------------------------------------------------

WEIGHT_COLUMNS = ["subject", "count_level"] + [f"w{i + 1}" for i in range(len(COUNT_LEVELS))]


def report_weights(manifest: DatasetManifest, model: UnnModel, out_csv=None,
                   icfg: InferenceConfig = InferenceConfig(), jobs: int = 1) -> list[dict]:
    """Slab-averaged weight vector per subject and count level, then mean and std rows per level.

    The std rows use the population form (``ddof=0``) across subjects.
    """
    rows = []
    for s in manifest.subjects():
        for f in COUNT_LEVELS:
            if manifest.find(s, f) is None:
                logger.warning("subject %s has no count level %g volume; skipped", s, f)
                continue
            res = infer_volume(manifest.load(s, f), model, icfg, jobs)
            w = np.mean(np.stack(res.weights), axis=0)
            rows.append({"subject": s, "count_level": f, **{f"w{i + 1}": float(v) for i, v in enumerate(w)}})
    if not rows:
        raise ValueError("no test volumes to report weights for")
    summary = []
    for f in COUNT_LEVELS:
        ws = np.array([[r[c] for c in WEIGHT_COLUMNS[2:]] for r in rows if abs(r["count_level"] - f) < 1e-9])
        if len(ws) == 0:
            continue
        summary.append({"subject": MEAN_SUBJECT, "count_level": f, **dict(zip(WEIGHT_COLUMNS[2:], ws.mean(0).tolist()))})
        summary.append({"subject": STD_SUBJECT, "count_level": f, **dict(zip(WEIGHT_COLUMNS[2:], ws.std(0).tolist()))})
    rows += summary
    if out_csv is not None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=WEIGHT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:g}" if k == "count_level" else (repr(r[k]) if k != "subject" else r[k]))
                        for k in WEIGHT_COLUMNS})
        atomic_write_text(out_csv, buf.getvalue())
    return rows


def read_weight_rows(fh) -> list[dict]:
    out = []
    for r in csv.DictReader(fh):
        out.append({k: (r[k] if k == "subject" else float(r[k])) for k in WEIGHT_COLUMNS})
    return out


def weight_spread(rows: list[dict], count_level: float) -> float:
    """Mean over the six components of the across-subject weight std at one level."""
    std = [r for r in rows if r["subject"] == STD_SUBJECT and abs(r["count_level"] - count_level) < 1e-9]
    if not std:
        raise KeyError(f"no std row for count level {count_level:g}")
    return float(np.mean([std[0][c] for c in WEIGHT_COLUMNS[2:]]))
