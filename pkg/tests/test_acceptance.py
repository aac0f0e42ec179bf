"""Acceptance criteria; each test prints one ``ACCEPTANCE <name>: PASS|FAIL`` line.

The three desk-scale criteria are marked ``nightly``. They need ``UNNPET_ACCEPTANCE_DIR`` pointing at a
run directory; missing stages are produced there with ``configs/desk_scale.ini`` (several CPU hours),
finished stages are reused.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import gradcheck, param_gradcheck, randomize_final
from test_objectives import ssim_oracle_2d, ssim_volume_oracle
from unnpet.cli import main as cli_main
from unnpet.models import (
    COUNT_LEVELS,
    Denoiser,
    DenoiserConfig,
    DenseBlock,
    NoiseAwareConfig,
    NoiseAwareNet,
    SCSEBlock,
    SlabShapeError,
    level_name,
)
from unnpet.objectives import SsimParams, composite_loss, mae_loss, nrmse, psnr, read_metric_rows, ssim_3axis, ssim_map
from unnpet.pipeline import (
    InferenceConfig,
    TrainConfig,
    assemble_unn,
    fit_unn,
    infer_volume,
    load_checkpoint,
    load_subject_levels,
    save_checkpoint,
)
from unnpet.pipeline.evaluation import MEAN_SUBJECT, STD_SUBJECT, WEIGHT_COLUMNS, read_weight_rows, weight_spread
from unnpet.sim import (
    ReconConfig,
    SimConfig,
    Sinogram,
    forward_project,
    generate_phantom,
    osem_reconstruct,
    poisson_sample,
    simulate_subject,
    subject_spec,
    thin_counts,
    torso_template,
)
from unnpet.tensor import ConvSpec, Tensor, conv3d, default_dtype, fully_connected, no_grad, tconv3d
from unnpet.volume import Volume

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk_scale.ini"
ARTIFACT_ENV = "UNNPET_ACCEPTANCE_DIR"


def verdict(capsys, name, checks: dict, info: str = ""):
    """Print the criterion line, then fail the test if any check failed."""
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
    if info:
        line += f" | {info}"
    if failed:
        line += f" | failed: {', '.join(failed)}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- numerical core -------------------------------------------------------------------------

def test_numerical_core(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}

    spec = ConvSpec(2, 3, (3, 3, 3), (2, 2, 2), (1, 1, 1))
    x, w, b = rng.normal(size=(2, 2, 5, 6, 6)), rng.normal(size=spec.weight_shape), rng.normal(size=3)
    r = rng.normal(size=(2, 3) + spec.output_shape((5, 6, 6)))
    errs["conv3d"] = gradcheck(lambda x_, w_, b_: (conv3d(x_, w_, b_, spec) * Tensor(r)).sum(), [x, w, b])

    tspec = ConvSpec(2, 3, (1, 3, 3), (1, 2, 2))
    xt = rng.normal(size=(2, 3, 3, 4, 4))
    rt = rng.normal(size=(2, 2, 3, 9, 9))
    errs["tconv3d"] = gradcheck(lambda x_, w_, b_: (tconv3d(x_, w_, b_, tspec, (3, 9, 9)) * Tensor(rt)).sum(),
                                [xt, rng.normal(size=tspec.weight_shape), rng.normal(size=2)])

    rf = rng.normal(size=(3, 4))
    errs["fc"] = gradcheck(lambda x_, w_, b_: (fully_connected(x_, w_, b_) * Tensor(rf)).sum(),
                           [rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)])

    with default_dtype(np.float64):
        dense = DenseBlock(4, 3, (5, 3, 3), rng=np.random.default_rng(2))
        se = SCSEBlock(4, 2, rng=np.random.default_rng(3))
        den = randomize_final(Denoiser(DenoiserConfig(base_filters=4, down_stages=2, up_stages=2), seed=3))
    xb = rng.normal(size=(2, 4, 3, 4, 4))
    rb = rng.normal(size=xb.shape)
    errs["scse"] = gradcheck(lambda t: (se(t) * Tensor(rb)).sum(), [xb])
    errs["dense"] = gradcheck(lambda t: (dense(t) * Tensor(rb)).sum(), [xb])
    with default_dtype(np.float64):
        xbt = Tensor(xb)
        errs["scse params"] = param_gradcheck(se, lambda: (se(xbt) * Tensor(rb)).sum())
        errs["dense params"] = param_gradcheck(dense, lambda: (dense(xbt) * Tensor(rb)).sum())

    y, xs = rng.random((1, 1, 11, 11, 12)) + 0.2, rng.random((1, 1, 11, 11, 12)) + 0.2
    yt = Tensor(y)
    errs["ssim"] = max(gradcheck(lambda t: ssim_map(Tensor(y[0, 0, 0]), t), [xs[0, 0, 0]]),
                       gradcheck(lambda t: ssim_3axis(yt, t), [xs], entries=40))
    errs["composite"] = gradcheck(lambda t: composite_loss(yt, t), [xs], entries=40)

    xd = rng.random((2, 1, 4, 8, 8)) + 0.5
    rd = rng.normal(size=xd.shape)
    errs["denoiser input"] = gradcheck(lambda t: (den(t) * Tensor(rd)).sum(), [xd])
    with default_dtype(np.float64):
        xdt = Tensor(xd)
        errs["denoiser params"] = param_gradcheck(den, lambda: (den(xdt) * Tensor(rd)).sum(), entries=60)
        # four down stages at the smallest in-plane size they accept, through the composite loss
        full = randomize_final(Denoiser(DenoiserConfig(base_filters=2), seed=4))
        xf, yf = Tensor(rng.random((1, 1, 11, 31, 31)) + 0.5), Tensor(rng.random((1, 1, 11, 31, 31)) + 0.5)
        errs["4-stage denoiser params"] = param_gradcheck(full, lambda: composite_loss(yf, full(xf)), entries=40)

    adjoint = 0.0
    for k, s, p, n in [((1, 3, 3), (1, 2, 2), (0, 0, 0), (4, 31, 31)), ((3, 3, 3), (1, 2, 2), (1, 1, 1), (20, 64, 64)),
                       ((5, 3, 3), (1, 1, 1), (2, 1, 1), (6, 7, 7))]:
        cs = ConvSpec(3, 2, k, s, p)
        xa, ya = rng.normal(size=(1, 3) + n), rng.normal(size=(1, 2) + cs.output_shape(n))
        wa = rng.normal(size=cs.weight_shape)
        with default_dtype(np.float64):
            lhs = float(np.vdot(conv3d(Tensor(xa), Tensor(wa), None, cs).data, ya))
            rhs = float(np.vdot(xa, tconv3d(Tensor(ya), Tensor(wa), None, cs, output_target=n).data))
        adjoint = max(adjoint, abs(lhs - rhs) / abs(lhs))
    elapsed = time.perf_counter() - t0

    checks = {f"grad {k}": v < 1e-4 for k, v in errs.items()}
    checks["adjoint"] = adjoint < 1e-8
    checks["runtime"] = elapsed < 120
    verdict(capsys, "numerical-core", checks,
            f"worst grad rel err {max(errs.values()):.2e}, adjoint {adjoint:.1e}, {elapsed:.0f} s")


# -- loss fidelity ---------------------------------------------------------------------------

def test_loss_fidelity(capsys):
    rng = np.random.default_rng(1)
    y = rng.random((2, 1, 11, 12, 13)) + 0.2
    x = np.clip(y + 0.15 * rng.normal(size=y.shape), 0, None)
    plane = rng.random((17, 14)) + 0.1
    noisy = plane + 0.1 * rng.normal(size=plane.shape)

    self_err = abs(float(ssim_map(plane, plane).data) - 1.0)
    map_err = abs(float(ssim_map(plane, noisy).data) - ssim_oracle_2d(plane, noisy))
    mae_oracle = sum(abs(a - b) for a, b in zip(y.ravel(), x.ravel())) / y.size
    mae_err = abs(float(mae_loss(y, x).data) - mae_oracle)
    s = np.mean([np.mean(ssim_volume_oracle(y[i, 0], x[i, 0])) for i in range(2)])
    comp_err = abs(float(composite_loss(y, x).data) - (mae_oracle + 0.6 * (1 - s)))
    c1, c2 = SsimParams().constants(1.0)
    checks = {
        "ssim(X,X)=1": self_err <= 1e-9,
        "ssim vs double loop": map_err < 1e-6,
        "mae recomposition": mae_err < 1e-7,
        "composite recomposition": comp_err < 1e-7,
        "C1": abs(c1 - 1e-4) < 1e-16,
        "C2": abs(c2 - 9e-4) < 1e-16,
    }
    verdict(capsys, "loss-fidelity", checks,
            f"self {self_err:.1e}, map {map_err:.1e}, mae {mae_err:.1e}, composite {comp_err:.1e}")


# -- gating contract -------------------------------------------------------------------------

def test_gating_contract(capsys):
    rng = np.random.default_rng(2)
    net = NoiseAwareNet(NoiseAwareConfig(slab_shape=(20, 32, 32), filters=4), seed=0)
    worst_sum, min_w = 0.0, np.inf
    with no_grad():
        for i in range(10):
            scale = 10.0 ** rng.uniform(-3, 3)
            x = (scale * rng.random((10, 1, 20, 32, 32))).astype(np.float32)
            if i == 0:
                x[0] = 0
            w = net(Tensor(x)).data.astype(np.float64)
            worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(axis=1) - 1))))
            min_w = min(min_w, float(w.min()))
    mismatch = []
    for shape in ((1, 1, 20, 64, 64), (1, 1, 16, 32, 32)):
        try:
            net(Tensor(np.zeros(shape, np.float32)))
            mismatch.append(False)
        except SlabShapeError:
            mismatch.append(True)
    checks = {"sum to one": worst_sum <= 1e-6, "non-negative": min_w >= 0, "slab mismatch raises": all(mismatch)}
    verdict(capsys, "gating-contract", checks, f"100 inputs, max |sum-1| {worst_sum:.1e}, min w {min_w:.2e}")


# -- simulator statistics ------------------------------------------------------------------

def test_simulator_statistics(capsys):
    rng = np.random.default_rng(3)
    full = poisson_sample(Sinogram(rng.random((20, 30, 8)), image_shape=(8, 20, 20)), 1e7, seed=1)
    ratios = {f: thin_counts(full, f, seed=5).counts.mean() / full.counts.mean() / f for f in COUNT_LEVELS}

    truth = generate_phantom(torso_template((8, 48, 48))).data
    errors = []
    osem_reconstruct(forward_project(truth, 60), ReconConfig(), postfilter=False,
                     callback=lambda it, k, x: errors.append(nrmse(truth, x)) if k == 4 else None)

    template = torso_template((20, 48, 48))
    cfg = SimConfig(n_angles=40, total_counts=2e6 * 20 / 32)
    ladder = {f: [] for f in COUNT_LEVELS}
    for i in range(10):
        spec = subject_spec(template, cfg, seed=11, index=i)
        ref = generate_phantom(spec).data
        vols = simulate_subject(spec, cfg)
        for f in COUNT_LEVELS:
            ladder[f].append(psnr(ref, vols[f].data))
    avg = [float(np.mean(ladder[f])) for f in sorted(COUNT_LEVELS, reverse=True)]

    checks = {
        "total counts >= 1e6": full.counts.sum() >= 1e6,
        "thinning within 1%": all(abs(r - 1) < 0.01 for r in ratios.values()),
        "osem nrmse decreasing": len(errors) == 6 and all(a > b for a, b in zip(errors, errors[1:])),
        "psnr ladder non-increasing": all(a >= b for a, b in zip(avg, avg[1:])),
    }
    worst = max(abs(r - 1) for r in ratios.values())
    verdict(capsys, "simulator-statistics", checks,
            f"worst thinning dev {100 * worst:.2f}%, psnr 50%->1% " + " ".join(f"{v:.2f}" for v in avg))


# -- stitching, freeze, checkpoints ---------------------------------------------------------

def test_stitching_freeze_checkpoints(capsys, tmp_path, tiny_dataset, tiny_denoisers):
    rng = np.random.default_rng(4)
    stitch = 0.0
    for depth, stride in ((40, 10), (35, 10), (20, 10), (47, 7), (23, 1)):
        v = Volume(rng.random((depth, 9, 7)).astype(np.float32))
        res = infer_volume(v, lambda t: t, InferenceConfig(20, stride))
        stitch = max(stitch, float(np.max(np.abs(res.volume.data - v.data))))

    _, split = tiny_dataset
    unn = assemble_unn(tiny_denoisers, (12, 32, 32), 2, 2, seed=0)
    before = [p.data.copy() for d in unn.denoisers for p in d.parameters()]
    cfg = TrainConfig(stage=2, learning_rate=1e-3, max_steps=6, val_every=3, slab_depth=12, slab_start_step=4,
                      gating_filters=2, fusion_filters=2)
    trained = fit_unn(unn, load_subject_levels(split["train"]), load_subject_levels(split["val"]), cfg).model
    frozen = all(np.array_equal(a, p.data) for a, p in zip(before, (p for d in trained.denoisers for p in d.parameters())))
    moved = any(not np.array_equal(a.data, b.data) for a, b in
                zip(trained.gating.parameters(), assemble_unn(tiny_denoisers, (12, 32, 32), 2, 2, seed=0).gating.parameters()))

    exact = True
    for name, model in (("denoiser", tiny_denoisers[0]), ("unn", trained)):
        p1, p2 = tmp_path / f"{name}1.ckpt", tmp_path / f"{name}2.ckpt"
        save_checkpoint(model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        exact &= p1.read_bytes() == p2.read_bytes()
    checks = {"identity stitching": stitch < 1e-6, "denoisers bit-identical": frozen, "gating trained": moved,
              "checkpoint byte-exact": exact}
    verdict(capsys, "stitching-freeze-checkpoints", checks, f"max stitch error {stitch:.1e}")


# -- desk-scale criteria (nightly) ----------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run():
    root = os.environ.get(ARTIFACT_ENV)
    if not root:
        pytest.skip(f"set {ARTIFACT_ENV} to a run directory to evaluate the desk-scale criteria")
    out = Path(root)
    base = ["--config", str(DESK_CONFIG), "--out", str(out)]
    ck = out / "checkpoints"

    def run(args, done: Path):
        if not done.exists():
            assert cli_main(base + args) == 0, f"step {args} failed"

    run(["simulate"], out / "data" / "manifest.csv")
    for f in COUNT_LEVELS:
        run(["train", "--stage", "1", "--count-level", str(f), "--resume"], ck / f"{level_name(f)}.ckpt")
    run(["train", "--stage", "2", "--resume"], ck / "unn.ckpt")
    run(["evaluate", "--split", "test"], out / "metrics.csv")
    run(["report-weights", "--split", "test"], out / "weights.csv")
    means = {(r.method, r.count_level): r.psnr_db
             for r in read_metric_rows((out / "metrics.csv").open()) if r.subject == MEAN_SUBJECT}
    weights = read_weight_rows((out / "weights.csv").open())
    return means, weights


def _lvl(means, method, f):
    return next(v for (m, g), v in means.items() if m == method and abs(g - f) < 1e-9)


@pytest.mark.nightly
def test_count_level_mismatch_trend(capsys, desk_run):
    means, _ = desk_run
    gains = {f: _lvl(means, level_name(f), f) - _lvl(means, "input", f) for f in COUNT_LEVELS}
    gap_b = _lvl(means, "Net_50", 0.5) - _lvl(means, "Net_1", 0.5)
    gap_c = _lvl(means, "Net_1", 0.01) - _lvl(means, "Net_50", 0.01)
    checks = {"(a) matched nets beat their input": all(g > 0 for g in gains.values()),
              "(b) Net_1 on 50% input >= 1 dB worse": gap_b >= 1.0,
              "(c) Net_50 on 1% input >= 1 dB worse": gap_c >= 1.0}
    verdict(capsys, "count-level-mismatch-trend", checks,
            "gains " + " ".join(f"{level_name(f)}:{g:+.2f}" for f, g in gains.items())
            + f" dB, gap(b) {gap_b:.2f} dB, gap(c) {gap_c:.2f} dB")


@pytest.mark.nightly
def test_unn_benefit(capsys, desk_run):
    means, _ = desk_run
    checks, notes = {}, []
    for f in COUNT_LEVELS:
        out = _lvl(means, "UNN_out", f)
        matched = _lvl(means, level_name(f), f)
        mismatched = max(_lvl(means, level_name(g), f) for g in COUNT_LEVELS if g != f)
        checks[f"{f:g}: >= best mismatched"] = out >= mismatched
        checks[f"{f:g}: within 1.5 dB of matched"] = out >= matched - 1.5
        notes.append(f"{f:g}: out {out:.2f} matched {matched:.2f} mismatched {mismatched:.2f}")
    for f in sorted(COUNT_LEVELS)[:2]:
        ws = _lvl(means, "UNN_ws", f)
        checks[f"{f:g}: >= uniform-weight baseline"] = _lvl(means, "UNN_out", f) >= ws
        notes.append(f"{f:g}: ws {ws:.2f}")
    verdict(capsys, "unn-benefit", checks, "; ".join(notes))


@pytest.mark.nightly
def test_weight_report_structure(capsys, desk_run):
    _, rows = desk_run
    subjects = [r for r in rows if r["subject"] not in (MEAN_SUBJECT, STD_SUBJECT)]
    sums = [sum(r[c] for c in WEIGHT_COLUMNS[2:]) for r in subjects]
    levels_with_std = {r["count_level"] for r in rows if r["subject"] == STD_SUBJECT}
    hi, lo = weight_spread(rows, 0.5), weight_spread(rows, 0.01)
    holds = hi <= lo
    checks = {"report has per-subject rows": len(subjects) > 0,
              "weights sum to one": all(abs(s - 1) < 1e-5 for s in sums),
              "std rows for all levels": len(levels_with_std) == len(COUNT_LEVELS)}
    # the inequality is reported, not enforced
    verdict(capsys, "weight-report-structure", checks,
            f"std@50% {hi:.4g} vs std@1% {lo:.4g}: inequality {'holds' if holds else 'DOES NOT hold (documented deviation)'}")
