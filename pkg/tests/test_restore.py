import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dazzlesim.camera import Camera, IlluminationSpec, LaserSpec, NoiseSpec, SensorImage
from dazzlesim.config import desk_config, rng_for
from dazzlesim.datagen import synthetic_scene
from dazzlesim.metrics import quality_report
from dazzlesim.optics import build_psf_stack, half_ring_mask
from dazzlesim.restore import (InpaintWarning, RestoreMismatchError, RestoreParams, Restorer,
                               channel_weights, deconvolve_exact, effective_channel_otf,
                               inpaint_harmonic, restore_pipeline, wiener_deconvolve)
from dazzlesim.spectral import daylight_illuminant, lift_rgb_to_hsi

CFG = desk_config()


@pytest.fixture(scope="module")
def ring_setup():
    mask = half_ring_mask(CFG)
    cam = Camera(CFG, mask, threads=1)
    return mask, cam, Restorer(CFG, mask, psf=cam.psf)


def _capture(cam, rgb, alpha_l=0.0, noise=None, alpha_b=0.7, seed=0):
    noise = NoiseSpec.from_config(CFG) if noise is None else noise
    return cam.expose(lift_rgb_to_hsi(rgb, CFG.grid), LaserSpec(532e-9, alpha_l),
                      IlluminationSpec(alpha_b), noise, seed)


def test_params_validation_and_round_trip():
    p = RestoreParams(wiener_reg=0.1)
    assert p.wiener_reg == (0.1, 0.1, 0.1)
    assert RestoreParams.from_dict(p.to_dict()) == p
    assert p.replace(inpaint_iters=5).inpaint_iters == 5
    for bad in ({"wiener_reg": 0}, {"prior": "x"}, {"boundary": "x"}, {"masked_weight": 2},
                {"inpaint_iters": -1}):
        with pytest.raises(ValueError):
            RestoreParams(**bad)


def test_inpaint_linear_ramp_is_exact():
    # linear functions are discrete harmonic, so interior holes refill exactly
    yy, xx = np.mgrid[0:40, 0:50]
    img = (0.01 * xx + 0.02 * yy)[..., None].astype(float)
    mask = np.zeros((40, 50), bool)
    mask[10:25, 15:35] = True
    filled, degenerate = inpaint_harmonic(np.where(mask[..., None], 9.0, img), mask, tol=1e-12)
    assert not degenerate
    np.testing.assert_allclose(filled, img, atol=1e-8)


def test_inpaint_keeps_known_pixels():
    rng = np.random.default_rng(0)
    img = rng.random((20, 20, 3))
    mask = rng.random((20, 20)) < 0.3
    filled, _ = inpaint_harmonic(img, mask)
    assert np.array_equal(filled[~mask], img[~mask])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)),
       arrays(np.bool_, (12, 12)))
def test_inpaint_maximum_principle(img, mask):
    filled, degenerate = inpaint_harmonic(img, mask, tol=1e-10)
    if degenerate:
        assert np.all(filled == 0.5)
        return
    if mask.any():
        known = img[~mask]
        assert filled[mask].min() >= known.min() - 1e-6
        assert filled[mask].max() <= known.max() + 1e-6


def test_inpaint_degenerate():
    filled, degenerate = inpaint_harmonic(np.zeros((4, 4)), np.ones((4, 4), bool))
    assert degenerate and np.all(filled == 0.5)


def test_channel_weights_rows_sum_to_one():
    w = channel_weights(CFG.grid, daylight_illuminant(CFG.grid))
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    assert w.min() >= 0


def test_effective_otf_unit_dc():
    psf = build_psf_stack(half_ring_mask(CFG), CFG, threads=1)
    h = effective_channel_otf(psf, daylight_illuminant(CFG.grid), shape=(256, 256))
    np.testing.assert_allclose(h[:, 0, 0].real, 1.0, rtol=1e-12)


def test_wiener_identity_otf():
    x = np.random.default_rng(1).random((16, 16, 3))
    out = wiener_deconvolve(x, np.ones((3, 16, 16)), RestoreParams(wiener_reg=1e-9, prior="white"))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_deconvolve_exact_recovers_blurred_image():
    rng = np.random.default_rng(2)
    x = np.clip(synthetic_scene(rng, (32, 32))[..., 0], 0, 1)
    psf = np.zeros((64, 64))
    psf[31:34, 31:34] = 1.0 / 9.0
    h = np.fft.fft2(np.fft.ifftshift(psf))
    pad = np.zeros((64, 64))
    pad[16:48, 16:48] = x
    y = np.fft.ifft2(np.fft.fft2(pad) * h).real[16:48, 16:48]
    est = deconvolve_exact(y, h, np.ones((32, 32)), 1e-6, "gradient", 300, y)
    assert np.abs(est - x).mean() < 0.5 * np.abs(y - x).mean()


def test_white_scene_normalises_to_one():
    cam = Camera(CFG, threads=1)
    s = _capture(cam, np.ones((128, 128, 3)), noise=NoiseSpec.disabled(CFG), alpha_b=0.5)
    raw = Restorer(CFG, psf=cam.psf).normalise(s)
    centre = raw[32:96, 32:96]
    np.testing.assert_allclose(centre, 1.0, rtol=2e-2)


def test_restore_beats_raw_on_coded_capture(ring_setup):
    _, cam, restorer = ring_setup
    rgb = synthetic_scene(rng_for(9), (128, 128))
    s = _capture(cam, rgb)
    raw = quality_report(restorer.raw(s), rgb)["l1"]
    restored = quality_report(restorer.restore(s), rgb)["l1"]
    assert restored < raw


def test_saturated_capture_restores_finite(ring_setup):
    _, cam, restorer = ring_setup
    rgb = synthetic_scene(rng_for(10), (128, 128))
    s = _capture(cam, rgb, alpha_l=1e4)
    assert s.saturated_pixels.any()
    out = restorer.restore(s)
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


def test_whole_image_saturated_warns(ring_setup):
    mask, cam, restorer = ring_setup
    s = _capture(cam, np.full((128, 128, 3), 0.5))
    full = SensorImage(np.full(s.counts.shape, CFG.s_sat), CFG.s_sat, s.metadata)
    with pytest.warns(InpaintWarning):
        restorer.restore(full)


def test_mismatch_errors(ring_setup):
    mask, cam, _ = ring_setup
    s = _capture(cam, np.full((128, 128, 3), 0.5))
    with pytest.raises(RestoreMismatchError):
        Restorer(CFG).restore(s)
    with pytest.raises(RestoreMismatchError):
        Restorer(desk_config(exposure_time=0.2), mask).restore(s)


def test_circular_boundary_path(ring_setup):
    mask, cam, restorer = ring_setup
    s = _capture(cam, synthetic_scene(rng_for(3), (128, 128)))
    out = restorer.restore(s, RestoreParams(boundary="circular"))
    assert out.shape == (128, 128, 3) and np.all(np.isfinite(out))


def test_pipeline_matches_restorer(ring_setup):
    mask, cam, restorer = ring_setup
    s = _capture(cam, synthetic_scene(rng_for(4), (128, 128)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        np.testing.assert_allclose(restore_pipeline(s, mask, CFG), restorer.restore(s))
