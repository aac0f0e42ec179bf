import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from unnpet.estimators import CountLevelDenoiser, UnifiedNoiseAwareDenoiser, check_paired_volumes, check_volume_batch
from unnpet.models import COUNT_LEVELS
from unnpet.pipeline import load_subject_levels

SMALL = dict(base_filters=2, patch_shape=(12, 32, 32), batch_size=1, max_steps=3, val_every=1, n_val_patches=1,
             patch_depth=12, stride=4, learning_rate=1e-3)


def _arrays(manifest):
    recs = load_subject_levels(manifest)
    X = np.stack([[r[f] for f in COUNT_LEVELS] for r in recs])
    y = np.stack([r["label"] for r in recs])
    return X, y


def test_validation_helpers(rng):
    assert check_volume_batch(rng.random((3, 4, 5))).shape == (1, 3, 4, 5)
    assert check_volume_batch(rng.random((2, 3, 4, 5)).astype(np.float64)).dtype == np.float32
    bad = rng.random((2, 3, 4, 5))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        check_volume_batch(bad)
    with pytest.raises(ValueError, match="dimensions"):
        check_volume_batch(rng.random((3, 4)))
    with pytest.raises(ValueError, match="empty"):
        check_volume_batch(np.zeros((0, 3, 4, 5)))
    with pytest.raises(ValueError, match="samples"):
        check_paired_volumes(rng.random((2, 3, 4, 5)), rng.random((3, 3, 4, 5)))
    with pytest.raises(ValueError, match="differ"):
        check_paired_volumes(rng.random((2, 3, 4, 5)), rng.random((2, 3, 4, 6)))


def test_params_round_trip_and_clone():
    est = CountLevelDenoiser(count_level=0.05, **SMALL)
    params = est.get_params()
    assert params["count_level"] == 0.05 and params["lambda_a"] == 0.6 and params["residual"] is True
    other = clone(est).set_params(max_steps=7)
    assert other.max_steps == 7 and est.max_steps == 3
    assert UnifiedNoiseAwareDenoiser().get_params()["slab_depth"] == 20


def test_unfitted_predict_raises(rng):
    with pytest.raises(NotFittedError):
        CountLevelDenoiser().predict(rng.random((1, 20, 32, 32)))
    with pytest.raises(NotFittedError):
        UnifiedNoiseAwareDenoiser().predict(rng.random((1, 20, 32, 32)))


def test_count_level_denoiser_fit_predict(tiny_dataset):
    _, split = tiny_dataset
    X, y = _arrays(split["train"])
    Xv, yv = _arrays(split["val"])
    k = COUNT_LEVELS.index(0.1)
    est = CountLevelDenoiser(count_level=0.1, **SMALL).fit(X[:, k], y, Xv[:, k], yv)
    assert est.n_steps_ == 3 and len(est.curve_) == 4
    pred = est.predict(X[:, k])
    assert pred.shape == y.shape and pred.dtype == np.float32
    assert np.array_equal(est.transform(X[:, k]), pred)
    assert np.isfinite(est.score(X[:, k], y))
    single = est.predict(X[0, k])
    np.testing.assert_array_equal(single[0], pred[0])
    # without explicit validation data the last pair is held out
    est2 = CountLevelDenoiser(count_level=0.1, **SMALL).fit(X[:, k], y)
    assert est2.n_steps_ == 3


def test_unified_estimator(tiny_dataset, tiny_denoisers):
    _, split = tiny_dataset
    X, y = _arrays(split["train"])
    Xv, yv = _arrays(split["val"])
    members = [CountLevelDenoiser.from_model(d, patch_depth=12, stride=4) for d in tiny_denoisers]
    unn = UnifiedNoiseAwareDenoiser(members, gating_filters=2, fusion_filters=2, learning_rate=1e-3, max_steps=3,
                                    val_every=1, slab_depth=12, slab_start_step=4, stride=4)
    unn.fit(X, y, Xv, yv)
    assert unn.best_val_loss_ <= unn.baseline_val_loss_ + 1e-6
    x_test = Xv[:, 2]
    out, ws = unn.predict(x_test), unn.transform(x_test)
    assert out.shape == ws.shape == yv.shape
    w = unn.predict_weights(x_test)
    assert w.shape == (1, 6)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert np.isfinite(unn.score(x_test, yv))
    with pytest.raises(ValueError, match="count levels"):
        unn.fit(X[:, :5], y)
    with pytest.raises(ValueError, match="six|6"):
        UnifiedNoiseAwareDenoiser(members[:5]).fit(X, y)
