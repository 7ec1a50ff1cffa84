import dataclasses

import numpy as np
import pytest

from dazzlesim.camera import (Camera, FlareParams, IlluminationSpec, LaserSpec, NoiseSpec,
                              SensorImage, add_flare, digitize, expose, laser_irradiance,
                              photon_factor, photons, scene_irradiance, sensor_sensitivity)
from dazzlesim.config import desk_config
from dazzlesim.metrics import i_sat
from dazzlesim.optics import HeightMap, build_psf_stack, half_ring_mask
from dazzlesim.spectral import SpectralCube, lift_rgb_to_hsi

CFG = desk_config()
OFF = NoiseSpec.disabled(CFG)


@pytest.fixture(scope="module")
def cam():
    return Camera(CFG, threads=1, flare=FlareParams(fraction=0.0))


def _zeros():
    return SpectralCube(np.zeros((128, 128, CFG.n_bands)), CFG.grid)


def _grey(v=0.5):
    return lift_rgb_to_hsi(np.full((128, 128, 3), v), CFG.grid)


def test_sensitivity_unit_peaks():
    s = sensor_sensitivity(desk_config(lambda_min=400e-9, lambda_max=700e-9, n_bands=301).grid)
    np.testing.assert_allclose(s.max(axis=1), 1.0, atol=1e-3)


def test_photon_factor_oracle():
    # photons per (W/m^2): lambda t dx^2 / (h c) with the rounded constants
    lam = CFG.grid.array
    expected = lam * 0.1 * 2.9e-6 ** 2 / (6.63e-34 * 3e8)
    np.testing.assert_allclose(photon_factor(CFG), expected, rtol=1e-14)
    with pytest.raises(ValueError):
        photons(SpectralCube(-np.ones((1, 1, 5)), CFG.grid), CFG)


def test_i_sat_fills_one_full_well():
    # I_sat over one exposure yields e_sat / Q_e photons, i.e. e_sat electrons
    n = i_sat(CFG.grid.array, CFG) * photon_factor(CFG)
    np.testing.assert_allclose(n * CFG.quantum_efficiency, CFG.full_well, rtol=1e-12)


def test_dark_scene_without_noise_is_zero(cam):
    s = cam.expose(_zeros(), LaserSpec(550e-9, 0.0), IlluminationSpec(0.7), OFF, seed=0)
    assert s.counts.max() == 0


def test_gain_divides_electrons(cam):
    # counts = floor(e / G): saturation is reached at the full well
    s = digitize(np.full((2, 2, 3), 1000.0 / CFG.quantum_efficiency), CFG, OFF, seed=0)
    assert np.all(s.counts == int(np.floor(1000.0 / CFG.gain)))
    s = digitize(np.full((1, 1, 3), 1e9), CFG, OFF, seed=0)
    assert np.all(s.counts == min(int(CFG.full_well / CFG.gain), CFG.s_sat))


def test_background_anchor(cam):
    # alpha_b is the peak channel filling as a fraction of the full well
    s = cam.expose(_grey(1.0), LaserSpec(550e-9, 0.0), IlluminationSpec(0.5), OFF, seed=0,
                   keep_electrons=True)
    assert s.electrons.max() == pytest.approx(0.5 * CFG.full_well, rel=1e-9)
    assert not s.saturation_mask.any()


def test_background_is_linear_in_alpha_b(cam):
    a = cam.expose(_grey(), LaserSpec(550e-9, 0.0), IlluminationSpec(0.2), OFF, 0,
                   keep_electrons=True).electrons
    b = cam.expose(_grey(), LaserSpec(550e-9, 0.0), IlluminationSpec(0.4), OFF, 0,
                   keep_electrons=True).electrons
    np.testing.assert_allclose(b, 2 * a, rtol=1e-9)


def test_laser_shift_moves_footprint(cam):
    dx = 10 * CFG.sensor_pitch / CFG.focal_length
    dy = -6 * CFG.sensor_pitch / CFG.focal_length
    s = cam.expose(_zeros(), LaserSpec(550e-9, 0.5, (dx, dy)), IlluminationSpec(0.0), OFF, 0,
                   keep_electrons=True)
    iy, ix = np.unravel_index(np.argmax(s.electrons.max(axis=2)), (128, 128))
    assert (iy, ix) == (64 - 6, 64 + 10)
    with pytest.raises(ValueError):
        cam.expose(_zeros(), LaserSpec(550e-9, 1.0, (1.0, 0.0)), IlluminationSpec(0.0), OFF, 0)


def test_coded_mask_lowers_laser_peak():
    ring = Camera(CFG, half_ring_mask(CFG), threads=1, flare=FlareParams(fraction=0.0))
    s = ring.expose(_zeros(), LaserSpec(550e-9, 1.0), IlluminationSpec(0.0), OFF, 0,
                    keep_electrons=True)
    assert s.electrons.max() < CFG.full_well
    assert not s.saturation_mask.any()


def test_flare_adds_exact_fraction():
    rng = np.random.default_rng(0)
    base = np.zeros((64, 64, 2))
    base[32, 32] = [1.0, 3.0]
    grid = desk_config(n_bands=2).grid
    cube = SpectralCube(base, grid)
    out = add_flare(cube, LaserSpec(450e-9, 1.0), FlareParams(fraction=0.1), rng)
    added = out.data.sum(axis=(0, 1)) - base.sum(axis=(0, 1))
    np.testing.assert_allclose(added, [0.1, 0.3], rtol=1e-12)
    assert add_flare(cube, LaserSpec(450e-9, 0.0), FlareParams(), rng) is cube


def test_flare_is_seeded():
    cam = Camera(CFG, threads=1)
    args = (_zeros(), LaserSpec(550e-9, 100.0), IlluminationSpec(0.0), OFF)
    a = cam.expose(*args, seed=3).counts
    assert np.array_equal(a, cam.expose(*args, seed=3).counts)
    assert not np.array_equal(a, cam.expose(*args, seed=4).counts)


def test_photon_noise_moments():
    mu = np.full((500, 500, 3), 1e4)
    noise = dataclasses.replace(OFF, photon=True)
    e = digitize(mu, CFG, noise, seed=1, keep_electrons=True).electrons
    q = CFG.quantum_efficiency
    assert e.mean() == pytest.approx(q * 1e4, rel=1e-3)
    assert e.std() == pytest.approx(q * 100.0, rel=2e-2)


def test_quantisation_dither_mean():
    noise = dataclasses.replace(OFF, quantization=True)
    e = 100.3 * CFG.gain
    s = digitize(np.full((400, 400, 3), e / CFG.quantum_efficiency), CFG, noise, seed=2)
    assert s.counts.mean() == pytest.approx(100.3 - 0.5, abs=0.01)


def test_full_noise_determinism(cam):
    noise = NoiseSpec.from_config(CFG)
    a = cam.expose(_grey(), LaserSpec(532e-9, 10.0), IlluminationSpec(0.6), noise, 9)
    b = cam.expose(_grey(), LaserSpec(532e-9, 10.0), IlluminationSpec(0.6), noise, 9)
    assert np.array_equal(a.counts, b.counts)
    assert a.metadata == b.metadata
    assert a.metadata["config_hash"] == CFG.hash()


def test_module_expose_matches_camera():
    h = HeightMap.flat(CFG)
    args = (LaserSpec(550e-9, 2.0), IlluminationSpec(0.5), NoiseSpec.from_config(CFG))
    a = expose(_grey(), h, *args, 5, CFG)
    b = Camera(CFG, h).expose(_grey(), *args, 5)
    assert np.array_equal(a.counts, b.counts)


def test_irradiance_helpers_agree_with_camera(cam):
    flat = build_psf_stack(HeightMap.flat(CFG), CFG, threads=1)
    b = scene_irradiance(_grey(), flat, IlluminationSpec(0.5), CFG, flat)
    l_ = laser_irradiance(LaserSpec(550e-9, 1.0), flat, flat, CFG)
    total, _, _ = cam.irradiance(_grey(), LaserSpec(550e-9, 1.0), IlluminationSpec(0.5),
                                 np.random.default_rng(0))
    np.testing.assert_allclose(total.data, b.data + l_.data, rtol=1e-12, atol=1e-18)


def test_sensor_image_validation():
    with pytest.raises(ValueError):
        SensorImage(np.zeros((4, 4)), 65535)
    with pytest.raises(ValueError):
        SensorImage(np.full((4, 4, 3), 70000), 65535)
    s = SensorImage(np.full((2, 2, 3), 65535), 65535)
    assert s.saturated_pixels.all()


def test_spec_validation():
    with pytest.raises(ValueError):
        LaserSpec(550e-9, -1.0)
    with pytest.raises(ValueError):
        IlluminationSpec(-0.1)
    with pytest.raises(ValueError):
        NoiseSpec(sigma_r=-1)
    with pytest.raises(ValueError):
        FlareParams(fraction=2.0)
    assert LaserSpec.from_dict(LaserSpec(5e-7, 2.0, (0.1, 0.2)).to_dict()) == \
        LaserSpec(5e-7, 2.0, (0.1, 0.2))
