import numpy as np
import pytest

from unnpet.tensor import Tensor, default_dtype, no_grad


def numeric_grad(fn, arrays, index, h=1e-6, entries=None, rng=None):
    """Central differences of scalar ``fn()`` w.r.t. ``arrays[index]`` (mutated in place).

    ``entries`` limits the check to that many randomly chosen positions.
    Returns (flat positions, numeric derivatives).
    """
    arr = arrays[index]
    flat = arr.reshape(-1)
    positions = np.arange(flat.size)
    if entries is not None and entries < flat.size:
        positions = (rng or np.random.default_rng(0)).choice(flat.size, entries, replace=False)
    out = np.empty(len(positions))
    for j, p in enumerate(positions):
        keep = flat[p]
        flat[p] = keep + h
        up = fn()
        flat[p] = keep - h
        down = fn()
        flat[p] = keep
        out[j] = (up - down) / (2 * h)
    return positions, out


def rel_err(analytic, numeric) -> float:
    """Max-norm relative error, scaled by the largest numeric derivative."""
    analytic, numeric = np.asarray(analytic, float).ravel(), np.asarray(numeric, float).ravel()
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


def gradcheck(build_loss, arrays, h=1e-6, entries=None, seed=0):
    """Compare tape gradients of ``build_loss(*tensors)`` with finite differences for every array.

    Runs in 64-bit mode; returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with default_dtype(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        loss = build_loss(*ts)
        loss.backward()
        grads = [t.grad.copy() for t in ts]

        def value():
            return float(build_loss(*[Tensor(a) for a in arrays]).data)

        worst = 0.0
        for i, g in enumerate(grads):
            pos, num = numeric_grad(value, arrays, i, h, entries, rng)
            worst = max(worst, rel_err(g.reshape(-1)[pos], num))
    return worst


def _load_flat(module, flat):
    """Write a flat float64 vector into the module parameters (in order)."""
    i = 0
    for p in module.parameters():
        n = p.size
        p.data = flat[i:i + n].reshape(p.shape)
        i += n


def param_gradcheck(module, forward, entries=40, seed=0):
    """Finite-difference check of d(forward())/d(params) on sampled parameter entries."""
    params = module.parameters()
    flat = np.concatenate([p.data.ravel() for p in params]).astype(np.float64)
    _load_flat(module, flat.copy())
    module.zero_grad()
    loss = forward()
    loss.backward()
    analytic = np.concatenate([p.grad.ravel() for p in params])
    rng = np.random.default_rng(seed)
    pos = rng.choice(flat.size, min(entries, flat.size), replace=False)
    num = np.empty(len(pos))
    h = 1e-6
    for j, k in enumerate(pos):
        for sign, slot in ((1, 0), (-1, 1)):
            probe = flat.copy()
            probe[k] += sign * h
            _load_flat(module, probe)
            with no_grad():
                v = float(forward().data)
            if slot == 0:
                up = v
            else:
                num[j] = (up - v) / (2 * h)
    _load_flat(module, flat)
    a = analytic[pos]
    return float(np.max(np.abs(a - num)) / max(np.max(np.abs(num)), 1e-12))


def randomize_final(denoiser, seed=0):
    """Replace the zero-initialised final conv weights so gradients reach every layer."""
    w = denoiser.final.weight
    w.data = np.random.default_rng(seed).normal(0.0, 0.1, w.shape).astype(w.dtype)
    return denoiser


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- shared small-scale data and models ---------------------------------------------------

TINY_DENOISER = dict(base_filters=2, down_stages=2, up_stages=2)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four simulated subjects on a 20 x 32 x 32 grid, split 2 / 1 / 1."""
    from unnpet.pipeline import split_subjects
    from unnpet.sim import SimConfig, build_dataset, torso_template

    out = tmp_path_factory.mktemp("tiny_data")
    manifest = build_dataset(4, torso_template((20, 32, 32)), SimConfig(n_angles=20, total_counts=3e5), 1, out)
    return manifest, split_subjects(manifest, 2, 1, 1)


def tiny_stage1_config(f, **kw):
    from unnpet.models import DenoiserConfig
    from unnpet.pipeline import TrainConfig

    base = dict(stage=1, count_level=f, batch_size=2, patch_shape=(12, 16, 16), learning_rate=1e-3,
                max_steps=20, val_every=10, n_val_patches=2, denoiser=DenoiserConfig(**TINY_DENOISER))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_denoisers(tiny_dataset):
    """Six briefly trained small denoisers, one per count level."""
    from unnpet.models import COUNT_LEVELS
    from unnpet.pipeline import load_level_pairs
    from unnpet.pipeline.training import fit_denoiser

    _, split = tiny_dataset
    models = []
    for f in COUNT_LEVELS:
        xs, ys, _ = load_level_pairs(split["train"], f)
        vx, vy, _ = load_level_pairs(split["val"], f)
        models.append(fit_denoiser(xs, ys, vx, vy, tiny_stage1_config(f)).model)
    return models
