import filecmp
import hashlib
from pathlib import Path

import numpy as np
import pytest

from unnpet.objectives import nrmse, psnr
from unnpet.sim import (
    Ellipsoid,
    PhantomError,
    PhantomSpec,
    ReconConfig,
    SimConfig,
    Sphere,
    build_dataset,
    forward_project,
    fwhm_to_sigma_voxels,
    gaussian_postfilter,
    generate_phantom,
    osem_reconstruct,
    poisson_sample,
    simulate_subject,
    subject_spec,
    thin_counts,
    torso_template,
)
from unnpet.sim.projector import GeometryError, ParallelBeamProjector, Sinogram
from unnpet.volume import DatasetManifest, Volume, read_volume, write_volume

LEVELS = (0.5, 0.25, 0.1, 0.05, 0.02, 0.01)


# -- phantom -----------------------------------------------------------------------------

def test_phantom_determinism_and_empty():
    spec = PhantomSpec(shape=(8, 20, 20), background=Ellipsoid((3.5, 9.5, 9.5), (4, 8, 8), 1.0, cylinder=True),
                       seed=3, center_jitter=1.0, intensity_jitter=0.2, random_lesions=2)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, generate_phantom(PhantomSpec(**{**spec.__dict__, "seed": 4})).data)
    assert not np.any(generate_phantom(PhantomSpec(shape=(4, 5, 6))).data)


def test_phantom_sphere_centre_value():
    body = Ellipsoid((4.5, 15.5, 15.5), (5, 12, 12), 1.5, cylinder=True)
    spec = PhantomSpec(shape=(10, 32, 32), background=body, spheres=(Sphere((5, 14, 17), 2.0, 4.0),))
    assert generate_phantom(spec).data[5, 14, 17] == pytest.approx(1.5 * 4.0)


def test_phantom_outside_grid_is_an_error():
    with pytest.raises(PhantomError):
        generate_phantom(PhantomSpec(shape=(8, 16, 16), spheres=(Sphere((4, 2, 8), 4.0, 2.0),)))
    with pytest.raises(PhantomError):
        generate_phantom(PhantomSpec(shape=(8, 16, 16), background=Ellipsoid((4, 8, 8), (3, 10, 4), 1.0)))


# -- projector --------------------------------------------------------------------------

def test_projector_linear_zero_and_adjoint(rng):
    p = ParallelBeamProjector((17, 19), n_angles=12)
    x = rng.random((3, 17, 19))
    y = rng.random((12, p.n_bins, 3))
    assert not np.any(p.project(np.zeros_like(x)))
    np.testing.assert_allclose(p.project(2.5 * x), 2.5 * p.project(x), rtol=1e-12)
    lhs, rhs = np.vdot(p.project(x), y), np.vdot(x, p.backproject(y))
    assert abs(lhs - rhs) / abs(lhs) < 1e-6
    with pytest.raises(GeometryError):
        ParallelBeamProjector((8, 8), n_angles=0)
    with pytest.raises(GeometryError):
        p.project(np.zeros((1, 8, 8)))


def test_projection_mass_constant_across_angles():
    spec = PhantomSpec(shape=(2, 40, 40), background=Ellipsoid((0.5, 19.5, 19.5), (2, 10, 10), 1.0, cylinder=True))
    sino = forward_project(generate_phantom(spec), n_angles=30)
    per_angle = sino.counts.sum(axis=(1, 2))
    assert per_angle.max() / per_angle.min() - 1 < 0.01
    # every angle sees the whole mass (line integrals in voxel units)
    assert per_angle.mean() == pytest.approx(generate_phantom(spec).data.sum(), rel=0.02)


# -- counts ------------------------------------------------------------------------------

def _int_sino(rng, total=1e7):
    expected = Sinogram(rng.random((20, 30, 8)), image_shape=(8, 20, 20))
    return poisson_sample(expected, total, seed=1)


def test_poisson_sample_contract(rng):
    mean = rng.random((10, 12, 4))
    mean[0] = 0
    s = poisson_sample(Sinogram(mean), 5e5, seed=2)
    assert s.is_integer and not np.any(s.counts[0])
    assert abs(s.counts.sum() - 5e5) < 3 * np.sqrt(5e5)
    assert np.array_equal(s.counts, poisson_sample(Sinogram(mean), 5e5, seed=2).counts)
    with pytest.raises(ValueError):
        poisson_sample(Sinogram(np.zeros((2, 2, 2))), 10, 0)


@pytest.mark.parametrize("f", LEVELS)
def test_thinning_mean_ratio(rng, f):
    full = _int_sino(rng)
    assert full.counts.sum() >= 1e6
    thin = thin_counts(full, f, seed=5)
    ratio = thin.counts.mean() / full.counts.mean()
    assert abs(ratio / f - 1) < 0.01
    assert np.all(thin.counts <= full.counts)
    assert thin.count_fraction == pytest.approx(f)


def test_thinning_edges_and_errors(rng):
    full = _int_sino(rng, 1e4)
    assert np.array_equal(thin_counts(full, 1.0, 0).counts, full.counts)
    assert not np.any(thin_counts(full, 0.0, 0).counts)
    assert np.array_equal(thin_counts(full, 0.3, 9).counts, thin_counts(full, 0.3, 9).counts)
    with pytest.raises(TypeError):
        thin_counts(Sinogram(np.ones((2, 2, 2))), 0.5, 0)
    with pytest.raises(ValueError):
        thin_counts(full, 1.5, 0)


# -- reconstruction --------------------------------------------------------------------

def test_recon_defaults():
    cfg = ReconConfig()
    assert (cfg.iterations, cfg.subsets, cfg.postfilter_fwhm_mm) == (6, 5, 5.0)


def test_osem_nrmse_decreases_on_noiseless_data():
    spec = torso_template((8, 48, 48))
    truth = generate_phantom(spec).data
    sino = forward_project(truth, 60)
    errors, mins = [], []

    def cb(it, k, x):
        mins.append(x.min())
        if k == 4:
            errors.append(nrmse(truth, x))

    osem_reconstruct(sino, ReconConfig(), postfilter=False, callback=cb)
    assert len(errors) == 6 and len(mins) == 30
    assert all(a > b for a, b in zip(errors, errors[1:]))
    assert min(mins) >= 0


def test_osem_subset_mismatch():
    sino = forward_project(np.ones((2, 10, 10)), 12)
    with pytest.raises(GeometryError):
        osem_reconstruct(sino, ReconConfig(subsets=5))


def test_postfilter_sigma_identity_and_mass(rng):
    sigma = fwhm_to_sigma_voxels(5.0, (1.65,) * 3)[0]
    assert sigma == pytest.approx(5.0 / (2 * np.sqrt(2 * np.log(2))) / 1.65, rel=1e-12)
    assert sigma == pytest.approx(1.2871, abs=5e-4)
    v = Volume(rng.random((12, 20, 20)).astype(np.float32))
    assert np.array_equal(gaussian_postfilter(v, 0.0).data, v.data)
    out = gaussian_postfilter(v, 5.0)
    assert abs(out.data.sum(dtype=np.float64) / v.data.sum(dtype=np.float64) - 1) < 1e-3


def test_psnr_ladder_over_ten_subjects():
    template = torso_template((20, 48, 48))
    cfg = SimConfig(n_angles=40, total_counts=2e6 * 20 / 32)
    by_level = {f: [] for f in LEVELS}
    means = []
    for i in range(10):
        spec = subject_spec(template, cfg, seed=11, index=i)
        truth = generate_phantom(spec).data
        vols = simulate_subject(spec, cfg)
        for f in LEVELS:
            by_level[f].append(psnr(truth, vols[f].data))
        means.append(vols[0.01].data.mean() / vols[1.0].data.mean())
    avg = [np.mean(by_level[f]) for f in LEVELS]
    assert all(a >= b for a, b in zip(avg, avg[1:])), avg
    assert all(abs(m - 1) < 0.15 for m in means)


# -- dataset -----------------------------------------------------------------------------

def _digest(folder: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_build_dataset_layout_and_determinism(tmp_path):
    template = torso_template((20, 32, 32))
    cfg = SimConfig(n_angles=20, total_counts=2e5)
    m1 = build_dataset(2, template, cfg, seed=5, out_dir=tmp_path / "a")
    build_dataset(2, template, cfg, seed=5, out_dir=tmp_path / "b", jobs=2)
    assert len(m1.entries) == 14
    assert sum(e.role == "label" for e in m1.entries) == 2
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    back = DatasetManifest.read(tmp_path / "a" / "manifest.csv")
    assert back.subjects() == ["sub000", "sub001"]
    vol = back.load("sub001", 0.05)
    assert vol.shape == (20, 32, 32) and vol.count_level == pytest.approx(0.05)
    assert np.all(vol.data >= 0)


def test_volume_round_trip(tmp_path, rng):
    v = Volume(rng.random((3, 4, 5)).astype(np.float32), (1.0, 2.0, 3.0), 0.25, "s9")
    hdr = write_volume(tmp_path / "v", v)
    back = read_volume(hdr)
    assert np.array_equal(back.data, v.data) and back.voxel_size_mm == v.voxel_size_mm
    assert back.count_level == 0.25 and back.subject_id == "s9"
    write_volume(tmp_path / "w", back)
    assert filecmp.cmp(tmp_path / "v.raw", tmp_path / "w.raw", shallow=False)
