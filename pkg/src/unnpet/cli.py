"""Command-line front end: ``unnpet [global flags] <command> [options]``.

Commands: simulate, train, infer, evaluate, report-weights. Settings come
from an INI file (``--config``); command-line flags override it.
"""
from __future__ import annotations

import argparse
import configparser
import io
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .models import COUNT_LEVELS, DenoiserConfig, UnnModel, level_name
from .objectives import LossConfig
from .pipeline.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline.config import InferenceConfig, TrainConfig
from .pipeline.data import match_level, split_subjects
from .pipeline.evaluation import WEIGHT_COLUMNS, evaluate, format_table, report_weights
from .pipeline.inference import infer_volume
from .pipeline.training import train_stage1, train_stage2
from .sim.dataset import SimConfig, build_dataset, level_tag
from .sim.phantom import torso_template
from .sim.recon import ReconConfig
from .volume import DatasetManifest, atomic_write_text, write_volume

logger = logging.getLogger("unnpet")


class CliError(Exception):
    """User-facing failure: printed without a traceback, exit code 2."""


# -- configuration ------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    out: str = "unnpet_run"
    manifest: str = ""             # default: <out>/data/manifest.csv
    n_train: int = 6
    n_val: int = 2
    n_test: int = 4
    subjects: int = 12
    phantom_shape: tuple = (32, 64, 64)
    voxel_size_mm: tuple = (1.65, 1.65, 1.65)
    sim: SimConfig = field(default_factory=SimConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    gating_filters: int = 32
    fusion_filters: int = 32
    lambda_a: float = 0.6
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.out_dir / "data" / "manifest.csv"

    def checkpoint_path(self, f: float | None) -> Path:
        name = "unn" if f is None else level_name(f)
        return self.out_dir / "checkpoints" / f"{name}.ckpt"

    def train_config(self, stage: int, count_level: float | None = None) -> TrainConfig:
        extra = dict(self.stage1 if stage == 1 else self.stage2)
        return TrainConfig(stage=stage, count_level=count_level, seed=self.seed,
                           loss=LossConfig(lambda_a=self.lambda_a), denoiser=self.denoiser,
                           gating_filters=self.gating_filters, fusion_filters=self.fusion_filters, **extra)


def _parse_tuple(text: str, cast=float) -> tuple:
    return tuple(cast(v.strip()) for v in text.replace("x", ",").split(",") if v.strip())


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(value: str, like, key: str):
    try:
        if isinstance(like, bool):
            return _parse_bool(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return _parse_tuple(value, int if like and isinstance(like[0], int) else float)
        return value.strip()
    except ValueError as exc:
        raise CliError(f"config key {key}: {exc}") from exc


_STAGE1_KEYS = {"batch_size": 15, "patch_shape": (20, 64, 64), "learning_rate": 1e-4, "max_steps": 2000,
                "val_every": 50, "patience": 10, "n_val_patches": 8, "checkpoint_every": 0}
_STAGE2_KEYS = {"learning_rate": 1e-4, "max_steps": 2000, "val_every": 50, "patience": 10, "slab_depth": 20,
                "slab_start_step": 1, "checkpoint_every": 0}
_SIM_KEYS = {"n_angles": 60, "total_counts": 2e6, "center_jitter": 2.0, "intensity_jitter": 0.25,
             "random_lesions": 2}
_RECON_KEYS = {"iterations": 6, "subsets": 5, "postfilter_fwhm_mm": 5.0}
_MODEL_KEYS = {"base_filters": 32, "skip": "additive", "residual": True, "gating_filters": 32,
               "fusion_filters": 32}
_SCHEMA = {
    "run": {"seed": 0, "out": ""},
    "data": {"manifest": "", "n_train": 6, "n_val": 2, "n_test": 4, "subjects": 12},
    "phantom": {"shape": (32, 64, 64), "voxel_size_mm": (1.65, 1.65, 1.65)},
    "simulate": _SIM_KEYS,
    "recon": _RECON_KEYS,
    "model": _MODEL_KEYS,
    "loss": {"lambda_a": 0.6},
    "stage1": _STAGE1_KEYS,
    "stage2": _STAGE2_KEYS,
    "inference": {"patch_depth": 20, "stride": 10},
}


def load_run_config(path: str | None) -> tuple[RunConfig, str]:
    """Parse an INI file into a ``RunConfig``; unknown sections or keys are errors.

    Returns the config and the canonical text snapshot of the parsed values.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {p}")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise CliError(f"cannot parse {p}: {exc}") from exc
    vals: dict[str, dict] = {s: {} for s in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise CliError(f"unknown config section [{section}] (known: {', '.join(_SCHEMA)})")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise CliError(f"unknown config key {section}.{key}")
            vals[section][key] = _coerce(raw, _SCHEMA[section][key], f"{section}.{key}")
    rc = RunConfig()
    rc.seed = vals["run"].get("seed", rc.seed)
    rc.out = vals["run"].get("out", "") or rc.out
    d = vals["data"]
    rc.manifest = d.get("manifest", "")
    rc.n_train, rc.n_val, rc.n_test = d.get("n_train", 6), d.get("n_val", 2), d.get("n_test", 4)
    rc.subjects = d.get("subjects", 12)
    rc.phantom_shape = tuple(int(v) for v in vals["phantom"].get("shape", rc.phantom_shape))
    rc.voxel_size_mm = vals["phantom"].get("voxel_size_mm", rc.voxel_size_mm)
    try:
        recon = ReconConfig(**vals["recon"])
        rc.sim = SimConfig(recon=recon, **vals["simulate"])
        m = dict(vals["model"])
        rc.gating_filters = m.pop("gating_filters", rc.gating_filters)
        rc.fusion_filters = m.pop("fusion_filters", rc.fusion_filters)
        rc.denoiser = DenoiserConfig(**m)
        rc.lambda_a = vals["loss"].get("lambda_a", rc.lambda_a)
        LossConfig(lambda_a=rc.lambda_a)
        rc.stage1, rc.stage2 = vals["stage1"], vals["stage2"]
        rc.inference = InferenceConfig(**vals["inference"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return rc, _snapshot(vals)


def _snapshot(vals: dict) -> str:
    buf = io.StringIO()
    for section in _SCHEMA:
        merged = {**_SCHEMA[section], **vals[section]}
        buf.write(f"[{section}]\n")
        for k, v in merged.items():
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            buf.write(f"{k} = {v}\n")
        buf.write("\n")
    return buf.getvalue()


def _apply_overrides(rc: RunConfig, args) -> None:
    if args.seed is not None:
        rc.seed = args.seed
    if args.out is not None:
        rc.out = args.out


def _write_metadata(rc: RunConfig, snapshot: str, args, command: str) -> None:
    import scipy
    import sklearn
    lines = [
        f"command: {command}",
        f"argv: {' '.join(sys.argv[1:]) if args.argv is None else ' '.join(args.argv)}",
        f"unnpet: {__version__}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        f"scipy: {scipy.__version__}",
        f"scikit-learn: {sklearn.__version__}",
        f"seed: {rc.seed}",
        f"jobs: {args.jobs}",
        f"deterministic: {args.deterministic}",
        "",
        "# effective configuration",
        snapshot.replace("[run]\n", f"[run]\n# effective seed {rc.seed}, out {rc.out}\n", 1),
    ]
    atomic_write_text(rc.out_dir / f"run-{command}.txt", "\n".join(lines))


# -- commands -------------------------------------------------------------------------

def _ensure_out(rc: RunConfig) -> None:
    try:
        rc.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {rc.out_dir}: {exc}") from exc


def _load_manifest(rc: RunConfig) -> DatasetManifest:
    p = rc.manifest_path
    if not p.is_file():
        raise CliError(f"manifest not found: {p} (run `unnpet simulate` first or set data.manifest)")
    return DatasetManifest.read(p)


def _split(rc: RunConfig, name: str) -> DatasetManifest:
    m = _load_manifest(rc)
    if name == "all":
        sub = m
    else:
        try:
            sub = split_subjects(m, rc.n_train, rc.n_val, rc.n_test)[name]
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    if not sub.subjects():
        raise CliError(f"the {name} split is empty")
    return sub


def cmd_simulate(rc: RunConfig, args) -> int:
    n = args.subjects if args.subjects is not None else rc.subjects
    out = rc.manifest_path.parent
    template = torso_template(rc.phantom_shape, rc.voxel_size_mm)
    try:
        manifest = build_dataset(n, template, rc.sim, rc.seed, out, jobs=args.jobs)
    except OSError as exc:
        raise CliError(str(exc)) from exc
    print(f"simulated {n} subjects: {len(manifest.entries)} volumes, manifest {out / 'manifest.csv'}")
    return 0


def _progress(row: dict) -> None:
    if "val_ssim" in row or "val_loss" in row:
        logger.info("step %s: %s", row["step"], {k: v for k, v in row.items() if k != "step"})


def cmd_train(rc: RunConfig, args) -> int:
    ck_dir = rc.out_dir / "checkpoints"
    curves = rc.out_dir / "curves"
    ck_dir.mkdir(parents=True, exist_ok=True)
    curves.mkdir(parents=True, exist_ok=True)
    splits = {k: _split(rc, k) for k in ("train", "val")}
    overrides = {"max_steps": args.max_steps} if args.max_steps is not None else {}
    if args.stage == 1:
        if args.count_level is None:
            raise CliError(f"--stage 1 needs --count-level, one of {', '.join(f'{f:g}' for f in COUNT_LEVELS)}")
        try:
            f = match_level(args.count_level)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        if overrides:
            rc.stage1 = {**rc.stage1, **overrides}
        cfg = rc.train_config(1, f)
        name = level_name(f)
        res = train_stage1(splits["train"], f, cfg, splits["val"], state_path=ck_dir / f"{name}.state",
                           resume=args.resume, curve_path=curves / f"{name}.csv", progress=_progress)
        save_checkpoint(res.model, rc.checkpoint_path(f))
        print(f"{name}: best validation SSIM {res.best_metric:.6f} at step {res.best_step} "
              f"({res.steps_run} steps run) -> {rc.checkpoint_path(f)}")
        return 0
    paths = {f: rc.checkpoint_path(f) for f in COUNT_LEVELS}
    missing = [f for f, p in paths.items() if not p.is_file()]
    if missing:
        raise CliError("stage 2 needs all six stage-1 checkpoints; missing: " +
                       ", ".join(f"{level_name(f)} (count level {f:g}) at {paths[f]}" for f in missing))
    if overrides:
        rc.stage2 = {**rc.stage2, **overrides}
    cfg = rc.train_config(2)
    res = train_stage2(splits["train"], paths, cfg, splits["val"], state_path=ck_dir / "unn.state",
                       resume=args.resume, curve_path=curves / "unn.csv", progress=_progress)
    save_checkpoint(res.model, rc.checkpoint_path(None))
    print(f"UNN: best validation loss {res.best_metric:.6f} at step {res.best_step} "
          f"(uniform-weight baseline {res.extras['baseline_val_loss']:.6f}) -> {rc.checkpoint_path(None)}")
    return 0


def _load_model(rc: RunConfig, path: str | None):
    p = Path(path) if path else rc.checkpoint_path(None)
    if not p.is_file():
        raise CliError(f"model checkpoint not found: {p}")
    return load_checkpoint(p)


def cmd_infer(rc: RunConfig, args) -> int:
    model = _load_model(rc, args.model)
    split = _split(rc, args.split)
    out_dir = Path(args.csv).parent if args.csv else rc.out_dir / "infer"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    levels = [match_level(args.count_level)] if args.count_level is not None else COUNT_LEVELS
    for s in split.subjects():
        for f in levels:
            if split.find(s, f) is None:
                logger.warning("subject %s has no count level %g; skipped", s, f)
                continue
            res = infer_volume(split.load(s, f), model, rc.inference, args.jobs)
            write_volume(out_dir / f"{s}_{level_tag(f)}_out", res.volume)
            if res.weights:
                w = np.mean(np.stack(res.weights), axis=0)
                rows.append([s, f"{f:g}"] + [repr(float(v)) for v in w])
    if rows:
        text = ",".join(WEIGHT_COLUMNS) + "\n" + "".join(",".join(r) + "\n" for r in rows)
        atomic_write_text(Path(args.csv) if args.csv else out_dir / "slab_weights.csv", text)
    print(f"wrote stitched outputs for {len(split.subjects())} subjects to {out_dir}")
    return 0


def cmd_evaluate(rc: RunConfig, args) -> int:
    model = _load_model(rc, args.model)
    split = _split(rc, args.split)
    out_csv = Path(args.csv) if args.csv else rc.out_dir / "metrics.csv"
    if isinstance(model, UnnModel):
        rows = evaluate(split, model, out_csv=out_csv, icfg=rc.inference, jobs=args.jobs)
    else:
        dens = [model if model.count_level is not None and abs(model.count_level - f) < 1e-9 else None
                for f in COUNT_LEVELS]
        rows = evaluate(split, None, dens, out_csv=out_csv, icfg=rc.inference, jobs=args.jobs)
    print(format_table(rows))
    print(f"metrics: {out_csv}")
    return 0


def cmd_report_weights(rc: RunConfig, args) -> int:
    model = _load_model(rc, args.model)
    if not isinstance(model, UnnModel):
        raise CliError("report-weights needs a UNN (stage-2) checkpoint")
    split = _split(rc, args.split)
    out_csv = Path(args.csv) if args.csv else rc.out_dir / "weights.csv"
    rows = report_weights(split, model, out_csv, rc.inference, args.jobs)
    for r in rows:
        if r["subject"] in ("mean", "std"):
            print(f"{r['subject']:>4} {r['count_level']:g}: " +
                  " ".join(f"{r[c]:.4f}" for c in WEIGHT_COLUMNS[2:]))
    print(f"weights: {out_csv}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report-weights": cmd_report_weights,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unnpet", description="Count-level-aware PET denoising toolkit.")
    p.add_argument("--config", help="INI file with run settings")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for simulate/infer/evaluate")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded execution")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic multi-count-level dataset")
    s.add_argument("--subjects", type=int)

    t = sub.add_parser("train", help="stage 1 (one denoiser) or stage 2 (gating + fusion)")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--count-level", type=float)
    t.add_argument("--resume", action="store_true", help="continue from the saved training state")
    t.add_argument("--max-steps", type=int)

    for name, help_ in (("infer", "stitched inference on a split"),
                        ("evaluate", "PSNR/NRMSE table for a split"),
                        ("report-weights", "per-subject gating weights")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--model", help="checkpoint path (default: <out>/checkpoints/unn.ckpt)")
        c.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
        c.add_argument("--out", dest="csv", help="output CSV path")
        if name == "infer":
            c.add_argument("--count-level", type=float)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        if args.deterministic:
            args.jobs = 1
        rc, snapshot = load_run_config(args.config)
        _apply_overrides(rc, args)
        _ensure_out(rc)
        code = COMMANDS[args.command](rc, args)
        _write_metadata(rc, snapshot, args, args.command)
        return code
    except CliError as exc:
        print(f"unnpet: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"unnpet: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
