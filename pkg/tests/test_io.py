import json

import numpy as np
import pytest

from dazzlesim import io
from dazzlesim.camera import SensorImage
from dazzlesim.config import desk_config
from dazzlesim.optics import HeightMap, half_ring_mask
from dazzlesim.spectral import SpectralCube

CFG = desk_config()


def test_heightmap_round_trip(tmp_path):
    h = HeightMap(np.random.default_rng(0).uniform(0, CFG.doe_h_max, (128, 128)),
                  CFG.pupil_pitch, CFG.doe_h_max)
    path = io.save_heightmap(tmp_path / "m", h)
    assert path.suffix == ".f32"
    assert path.stat().st_size == 128 * 128 * 4
    back = io.load_heightmap(path)
    assert back.hash() == h.to_float32().hash()
    assert np.array_equal(back.heights, h.to_float32().heights)


def test_heightmap_errors(tmp_path):
    path = io.save_heightmap(tmp_path / "m", half_ring_mask(CFG))
    with pytest.raises(ValueError):
        io.load_heightmap(tmp_path / "m.npy")
    meta = json.loads(path.with_suffix(".json").read_text())
    meta["hash"] = "0" * 16
    path.with_suffix(".json").write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        io.load_heightmap(path)
    with pytest.raises(FileNotFoundError):
        io.load_heightmap(tmp_path / "missing")


def test_cube_round_trip(tmp_path):
    cube = SpectralCube(np.random.default_rng(1).random((4, 6, 5)), CFG.grid)
    back = io.load_cube(io.save_cube(tmp_path / "c", cube))
    np.testing.assert_allclose(back.data, cube.data, rtol=1e-7)
    assert back.grid == cube.grid


def test_png16_channel_order(tmp_path):
    img = np.zeros((3, 4, 3), np.uint16)
    img[..., 0] = 1000
    img[..., 2] = 65535
    io.write_png16(tmp_path / "a.png", img)
    assert np.array_equal(io.read_image(tmp_path / "a.png"), img)
    with pytest.raises(TypeError):
        io.write_png16(tmp_path / "b.png", img.astype(float))


def test_srgb_decode():
    # reference points of the sRGB transfer curve
    np.testing.assert_allclose(io.srgb_to_linear(np.array([0.0, 0.04045, 0.5, 1.0])),
                               [0.0, 0.04045 / 12.92, 0.214041, 1.0], atol=1e-6)


def test_8bit_scene_is_linearised(tmp_path):
    import cv2

    cv2.imwrite(str(tmp_path / "s.png"), np.full((2, 2, 3), 128, np.uint8))
    np.testing.assert_allclose(io.read_scene(tmp_path / "s.png"), io.srgb_to_linear(128 / 255))


def test_sensor_round_trip(tmp_path):
    s = SensorImage(np.random.default_rng(2).integers(0, 65536, (5, 7, 3)), 65535, {"seed": 3})
    back = io.load_sensor_image(io.save_sensor_image(tmp_path / "s", s))
    assert np.array_equal(back.counts, s.counts)
    assert back.metadata == {"seed": 3}
    with pytest.raises(OSError):
        io.read_image(tmp_path / "nothing.png")
