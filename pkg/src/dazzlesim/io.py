"""On-disk formats.

Height maps and cubes are raw little-endian float32 with a JSON sidecar of
the same stem; sensor images and RGB ground truth are 16-bit PNGs (cv2,
stored RGB-ordered on disk as standard PNG) with a JSON sidecar.
"""
from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .config import WavelengthGrid
from .optics import HeightMap
from .spectral import SpectralCube

FORMAT_VERSION = 1


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_heightmap(path, h: HeightMap) -> Path:
    path = Path(path).with_suffix(".f32")
    h = h.to_float32()
    np.asarray(h.heights, dtype="<f4").tofile(path)
    write_json(_sidecar(path), {
        "kind": "heightmap", "version": FORMAT_VERSION, "shape": list(h.shape),
        "pitch": h.pitch, "h_max": h.h_max, "hash": h.hash(), "units": "m",
    })
    return path


def load_heightmap(path) -> HeightMap:
    path = Path(path)
    if path.suffix == ".npy":
        raise ValueError("height maps are stored as .f32 + .json; .npy is not accepted")
    path = path.with_suffix(".f32")
    meta_path = _sidecar(path)
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"missing height map {path} or its sidecar")
    meta = read_json(meta_path)
    if meta.get("kind") != "heightmap":
        raise ValueError(f"{meta_path} does not describe a height map")
    data = np.fromfile(path, dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} values, found {data.size}")
    h = HeightMap(data.reshape(shape).astype(float), meta["pitch"], meta["h_max"])
    if meta.get("hash") and h.hash() != meta["hash"]:
        raise ValueError(f"{path}: content hash does not match the sidecar")
    return h


def save_cube(path, cube: SpectralCube, extra: dict | None = None) -> Path:
    path = Path(path).with_suffix(".f32")
    np.asarray(cube.data, dtype="<f4").tofile(path)
    meta = {"kind": "cube", "version": FORMAT_VERSION, "shape": list(cube.data.shape),
            "wavelengths_m": list(cube.grid.lambdas), "layout": "HWL"}
    meta.update(extra or {})
    write_json(_sidecar(path), meta)
    return path


def load_cube(path) -> SpectralCube:
    path = Path(path).with_suffix(".f32")
    meta = read_json(_sidecar(path))
    data = np.fromfile(path, dtype="<f4").reshape(meta["shape"]).astype(float)
    return SpectralCube(data, WavelengthGrid(tuple(meta["wavelengths_m"])))


def write_png16(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint16:
        raise TypeError("expected a uint16 image")
    if img.ndim == 3:
        img = img[..., ::-1]  # cv2 writes BGR
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit image as RGB (H, W, 3) keeping its integer dtype."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"could not read image {path}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.ascontiguousarray(img[..., 2::-1])


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def read_scene(path) -> np.ndarray:
    """Linear RGB in [0, 1]: 16-bit files are taken as linear, 8-bit as sRGB."""
    img = read_image(path)
    if img.dtype == np.uint16:
        return img.astype(float) / 65535.0
    if img.dtype == np.uint8:
        return srgb_to_linear(img.astype(float) / 255.0)
    raise ValueError(f"{path}: unsupported pixel type {img.dtype}")


def rgb_to_u16(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_scene(path, rgb: np.ndarray) -> None:
    write_png16(path, rgb_to_u16(rgb))


def save_sensor_image(path, s) -> Path:
    path = Path(path).with_suffix(".png")
    write_png16(path, s.counts.astype(np.uint16))
    write_json(_sidecar(path), {"kind": "sensor", "version": FORMAT_VERSION, "s_sat": s.s_sat,
                                "metadata": s.metadata})
    return path


def load_sensor_image(path):
    from .camera import SensorImage

    path = Path(path).with_suffix(".png")
    meta = read_json(_sidecar(path))
    return SensorImage(read_image(path), meta["s_sat"], meta["metadata"])
