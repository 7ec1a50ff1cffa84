"""Scenario sampling, synthetic scenes and (sensor, ground truth) dataset synthesis.

Directory layout written by :func:`synth_dataset` and :func:`test_grid`::

    out_dir/
      manifest.jsonl          header line, then one JSON object per item
      mask.f32, mask.json     the height map every item was captured with
      items/00000_sensor.png  16-bit counts (RGB order)
      items/00000_sensor.json scenario metadata and seed
      items/00000_gt.png      16-bit linear RGB ground truth

Every item is a pure function of (config, mask, scene file, manifest row),
so any row can be regenerated and compared bit for bit.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from . import io
from .camera import Camera, IlluminationSpec, LaserSpec, NoiseSpec, SensorImage
from .config import SimConfig, config_from_dict, derive_seed, rng_for
from .metrics import quality_report, resize_bicubic
from .optics import HeightMap
from .restore import Restorer, RestoreParams
from .spectral import lift_rgb_to_hsi

log = logging.getLogger(__name__)

ALPHA_TABLE_SIZE = 100_000
ALPHA_TABLE_SEED = 20240229
TEST_ALPHAS = (0.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
TEST_LASER_WAVELENGTH = 532e-9
SCENE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
MANIFEST_NAME = "manifest.jsonl"


@lru_cache(maxsize=4)
def alpha_table(size: int = ALPHA_TABLE_SIZE, alpha_max: float = 2e6,
                seed: int = ALPHA_TABLE_SEED) -> np.ndarray:
    """Fixed table of laser strengths drawn uniformly from [0, alpha_max]."""
    table = np.random.default_rng(seed).uniform(0.0, alpha_max, size)
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class ScenarioDistribution:
    """Marginals of the random capture conditions.

    ``shift_3sigma`` is the per-axis three-sigma of the laser footprint
    shift as a fraction of the sensor extent. With ``literal_shift`` the
    three-sigma applies to the direction components themselves, in units
    of f / W_s, which throws almost every laser off the sensor.
    """

    focal_length: float
    sensor_extent: tuple[float, float]  # (W_s, H_s) in metres
    lambda_l_range: tuple[float, float] = (400e-9, 700e-9)
    alpha_l_max: float = 2e6
    p_free: float = 1.0 / 7.0
    shift_3sigma: float = 0.36
    literal_shift: bool = False
    alpha_b_range: tuple[float, float] = (0.3, 0.7)
    mu_r_range: tuple[float, float] = (350.0, 400.0)
    sigma_r_range: tuple[float, float] = (10.0, 11.0)
    c1_range: tuple[float, float] = (0.0, 0.25)
    c2_range: tuple[float, float] = (0.9, 1.1)
    mu_c: float = 0.002
    exposure_mean: float = 0.1
    exposure_std: float = 0.01
    literal_c1: bool = False

    @classmethod
    def from_config(cls, cfg: SimConfig, **kw) -> "ScenarioDistribution":
        """Default marginals; the laser wavelength range is clipped to the grid."""
        lo = max(400e-9, cfg.lambda_min)
        hi = min(700e-9, cfg.lambda_max)
        base = dict(focal_length=cfg.focal_length,
                    sensor_extent=(cfg.sensor_res[0] * cfg.sensor_pitch,
                                   cfg.sensor_res[1] * cfg.sensor_pitch),
                    lambda_l_range=(lo, hi), mu_c=cfg.dark_current,
                    exposure_mean=cfg.exposure_time, exposure_std=0.1 * cfg.exposure_time)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioDistribution":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass(frozen=True)
class Scenario:
    laser: LaserSpec
    illumination: IlluminationSpec
    noise: NoiseSpec
    exposure_time: float

    def to_dict(self) -> dict:
        return {"laser": self.laser.to_dict(), "illumination": self.illumination.to_dict(),
                "noise": self.noise.to_dict(), "exposure_time": self.exposure_time}

    @classmethod
    def from_dict(cls, d: dict, cfg: SimConfig) -> "Scenario":
        return cls(LaserSpec.from_dict(d["laser"]),
                   IlluminationSpec.from_dict(d["illumination"], cfg.grid),
                   NoiseSpec.from_dict(d["noise"]), d["exposure_time"])


def sample_scenario(dist: ScenarioDistribution, seed: int) -> Scenario:
    """Draw one capture condition; equal seeds give equal scenarios."""
    rng = np.random.default_rng(seed)
    free = rng.random() < dist.p_free
    alpha_l = 0.0 if free else float(alpha_table(alpha_max=dist.alpha_l_max)[
        rng.integers(ALPHA_TABLE_SIZE)])
    lam = float(rng.uniform(*dist.lambda_l_range))
    f = dist.focal_length
    if dist.literal_shift:
        sigma_n = np.array([dist.shift_3sigma * f / w for w in dist.sensor_extent]) / 3.0
    else:
        sigma_n = np.array([dist.shift_3sigma * w / f for w in dist.sensor_extent]) / 3.0
    n_l = rng.normal(0.0, sigma_n)
    # keep the footprint on the padded grid (one sensor extent either way)
    limit = np.array(dist.sensor_extent) / f
    n_l = np.clip(n_l, -limit, limit)
    alpha_b = float(rng.uniform(*dist.alpha_b_range))
    noise = NoiseSpec(
        c1=float(rng.uniform(*dist.c1_range)), c2=float(rng.uniform(*dist.c2_range)),
        mu_c=float(max(0.0, rng.normal(dist.mu_c, dist.mu_c / 2))),
        mu_r=float(rng.uniform(*dist.mu_r_range)), sigma_r=float(rng.uniform(*dist.sigma_r_range)),
        literal_c1=dist.literal_c1)
    exposure = float(max(1e-6, rng.normal(dist.exposure_mean, dist.exposure_std)))
    return Scenario(LaserSpec(lam, alpha_l, (float(n_l[0]), float(n_l[1]))),
                    IlluminationSpec(alpha_b), noise, exposure)


def test_scenario(cfg: SimConfig, alpha_l: float) -> Scenario:
    """Fixed evaluation conditions with the given laser strength."""
    noise = NoiseSpec(c1=0.2, c2=1.0, mu_c=0.002, mu_r=390.0, sigma_r=10.5)
    return Scenario(LaserSpec(TEST_LASER_WAVELENGTH, float(alpha_l)), IlluminationSpec(0.7),
                    noise, cfg.exposure_time)


# -- synthetic scenes ----------------------------------------------------------

def synthetic_scene(rng: np.random.Generator, shape=(128, 128)) -> np.ndarray:
    """Piecewise-smooth linear RGB scene in [0, 1]: shaded backdrop plus shapes."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.15, 0.6, 3)
    grad = rng.uniform(-0.25, 0.25, (2, 3))
    img = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
    for _ in range(int(rng.integers(3, 9))):
        colour = rng.uniform(0.05, 0.95, 3)
        cx, cy = rng.uniform(0, 1, 2)
        a, b = rng.uniform(0.05, 0.3, 2)
        th = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
        v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
        if rng.random() < 0.5:
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1
        else:
            inside = (np.abs(u) <= a) & (np.abs(v) <= b)
        img[inside] = colour
    img = ndimage.gaussian_filter(img, (1.0, 1.0, 0))
    return np.clip(img, 0.0, 1.0)


def write_scene_set(out_dir, n: int, shape=(128, 128), seed: int = 0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(n):
        p = out / f"scene_{k:04d}.png"
        io.write_scene(p, synthetic_scene(rng_for(seed, k), shape))
        paths.append(p)
    return paths


def list_scenes(scene_dir) -> list[Path]:
    d = Path(scene_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in SCENE_SUFFIXES)
    if not files:
        raise ValueError(f"no scene images found in {d}")
    return files


def crop_scene(rgb: np.ndarray, shape: tuple[int, int], rng: np.random.Generator):
    """Random crop to ``shape`` (H, W); smaller scenes are first upscaled."""
    h, w = rgb.shape[:2]
    th, tw = shape
    if h < th or w < tw:
        s = max(th / h, tw / w)
        rgb = np.clip(resize_bicubic(rgb, (max(th, round(h * s)), max(tw, round(w * s)))), 0, 1)
        h, w = rgb.shape[:2]
    y0 = int(rng.integers(0, h - th + 1))
    x0 = int(rng.integers(0, w - tw + 1))
    return rgb[y0:y0 + th, x0:x0 + tw], (y0, x0)


# -- manifest ------------------------------------------------------------------

@dataclass
class DatasetManifest:
    header: dict
    items: list[dict] = field(default_factory=list)
    root: Path | None = None

    @property
    def base_seed(self) -> int:
        return self.header["base_seed"]

    @property
    def mask_hash(self) -> str:
        return self.header["mask_hash"]

    def config(self) -> SimConfig:
        return config_from_dict(self.header["config"])

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "header", **self.header}, sort_keys=True) + "\n")
            for item in self.items:
                fh.write(json.dumps(item, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        lines = [json.loads(x) for x in path.read_text().splitlines() if x.strip()]
        if not lines or lines[0].get("type") != "header":
            raise ValueError(f"{path}: missing manifest header")
        header = {k: v for k, v in lines[0].items() if k != "type"}
        items = lines[1:]
        idx = [it["index"] for it in items]
        if idx != list(range(len(items))):
            raise ValueError(f"{path}: item indices are not dense and ordered")
        return cls(header, items, path.parent)

    def load_mask(self) -> HeightMap:
        h = io.load_heightmap(self.root / self.header["mask_file"])
        if h.hash() != self.mask_hash:
            raise ValueError("mask file does not match the manifest hash")
        return h

    def load_pair(self, item: dict) -> tuple[SensorImage, np.ndarray]:
        s = io.load_sensor_image(self.root / item["files"]["sensor"])
        gt = io.read_image(self.root / item["files"]["gt"]).astype(float) / 65535.0
        return s, gt


# -- synthesis -----------------------------------------------------------------

def _capture(camera: Camera, cfg: SimConfig, rgb: np.ndarray, scenario: Scenario, seed: int,
             downsample: int | None):
    cube = lift_rgb_to_hsi(rgb, cfg.grid)
    s = camera.expose(cube, scenario.laser, scenario.illumination, scenario.noise, seed,
                      scenario.exposure_time)
    gt = rgb
    if downsample:
        # resampled counts are re-quantised; saturation survives as the max value
        counts = np.clip(np.round(resize_bicubic(s.counts.astype(float), (downsample,) * 2)),
                         0, s.s_sat)
        s = SensorImage(counts.astype(np.int64), s.s_sat, {**s.metadata, "downsampled": downsample})
        gt = np.clip(resize_bicubic(rgb, (downsample,) * 2), 0.0, 1.0)
    return s, gt


def _render_item(camera: Camera, cfg: SimConfig, scene_path: Path, row: dict, downsample):
    rgb = io.read_scene(scene_path)
    crop_rng = rng_for(row["seed"], 1)
    patch, origin = crop_scene(rgb, (cfg.sensor_res[1], cfg.sensor_res[0]), crop_rng)
    if list(origin) != list(row.get("crop", origin)):
        raise ValueError("crop origin disagrees with the manifest row")
    scenario = Scenario.from_dict(row["scenario"], cfg)
    s, gt = _capture(camera, cfg, patch, scenario, row["seed"], downsample)
    return s, gt, origin


_WORKER: dict = {}


def _worker_init(cfg_dict: dict, heights: np.ndarray, pitch: float, h_max: float):
    cfg = config_from_dict(cfg_dict)
    _WORKER["cfg"] = cfg
    _WORKER["camera"] = Camera(cfg, HeightMap(heights, pitch, h_max), threads=1)


def _worker_item(args):
    scene_path, row, downsample, out_dir = args
    cfg, camera = _WORKER["cfg"], _WORKER["camera"]
    return _write_item(camera, cfg, Path(scene_path), row, downsample, Path(out_dir))


def _write_item(camera, cfg, scene_path: Path, row: dict, downsample, out_dir: Path) -> dict:
    try:
        s, gt, origin = _render_item(camera, cfg, scene_path, row, downsample)
    except OSError as exc:
        return {"error": str(exc)}
    k = row["index"]
    items = out_dir / "items"
    sensor = io.save_sensor_image(items / f"{k:05d}_sensor.png", s)
    io.write_png16(items / f"{k:05d}_gt.png", io.rgb_to_u16(gt))
    row = dict(row, crop=list(origin), saturated_pixels=int(s.saturated_pixels.sum()),
               files={"sensor": str(sensor.relative_to(out_dir)),
                      "gt": f"items/{k:05d}_gt.png"})
    return row


def _run(jobs, cfg, mask, out_dir, threads):
    if threads is None:
        threads = os.cpu_count() or 1
    if threads <= 1 or len(jobs) <= 1:
        camera = Camera(cfg, mask, threads=1)
        return [_write_item(camera, cfg, Path(p), row, ds, out_dir) for p, row, ds, _ in jobs]
    with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init,
                             initargs=(cfg.to_dict(), mask.heights, mask.pitch,
                                       mask.h_max)) as pool:
        return list(pool.map(_worker_item, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def _prepare_out(out_dir, mask: HeightMap, cfg: SimConfig, base_seed: int, extra: dict):
    out = Path(out_dir)
    (out / "items").mkdir(parents=True, exist_ok=True)
    mask = mask.to_float32()
    io.save_heightmap(out / "mask", mask)
    header = {"base_seed": int(base_seed), "mask_hash": mask.hash(), "mask_file": "mask.f32",
              "config": cfg.to_dict(), "config_hash": cfg.hash(), "version": io.FORMAT_VERSION}
    header.update(extra)
    return out, mask, header


def synth_dataset(scene_dir, mask: HeightMap, dist: ScenarioDistribution, n_items: int,
                  out_dir, cfg: SimConfig, base_seed: int | None = None,
                  downsample: int | None = None, threads: int | None = None) -> DatasetManifest:
    """Materialise ``n_items`` randomly conditioned pairs and their manifest."""
    if n_items < 0:
        raise ValueError("n_items must be >= 0")
    base_seed = cfg.rng_seed if base_seed is None else base_seed
    scenes = list_scenes(scene_dir)
    out, mask, header = _prepare_out(out_dir, mask, cfg, base_seed,
                                     {"kind": "synth", "distribution": dist.to_dict(),
                                      "scene_dir": str(Path(scene_dir).resolve()),
                                      "downsample": downsample})
    order = rng_for(base_seed, 0).permutation(len(scenes))
    rows: list[dict] = []
    cursor = 0
    bad: set[Path] = set()
    while len(rows) < n_items:
        need = n_items - len(rows)
        jobs = []
        while len(jobs) < need:
            if len(bad) == len(scenes):
                raise ValueError("no readable scenes left")
            path = scenes[order[cursor % len(scenes)]]
            cursor += 1
            if path in bad:
                continue
            k = len(rows) + len(jobs)
            seed = derive_seed(base_seed, k + 1)
            row = {"index": k, "seed": seed, "scene": path.name, "config_hash": cfg.hash(),
                   "scenario": sample_scenario(dist, seed).to_dict()}
            jobs.append((str(path), row, downsample, str(out)))
        done = _run(jobs, cfg, mask, out, threads)
        for job, res in zip(jobs, done):
            if "error" in res:
                log.warning("skipping unreadable scene %s: %s", job[0], res["error"])
                bad.add(Path(job[0]))
                break  # later items are re-drawn so indices stay dense
            rows.append(res)
    manifest = DatasetManifest(header, rows, out)
    manifest.write()
    return manifest


def test_grid(scene_dir, mask: HeightMap, cfg: SimConfig, out_dir, base_seed: int | None = None,
              alphas=TEST_ALPHAS, threads: int | None = None) -> DatasetManifest:
    """Every scene at each evaluation laser strength, other conditions fixed."""
    base_seed = cfg.rng_seed if base_seed is None else base_seed
    scenes = list_scenes(scene_dir)
    out, mask, header = _prepare_out(out_dir, mask, cfg, base_seed,
                                     {"kind": "test_grid", "alphas": list(alphas),
                                      "scene_dir": str(Path(scene_dir).resolve()),
                                      "downsample": None})
    jobs = []
    for si, path in enumerate(scenes):
        for ai, alpha in enumerate(alphas):
            k = si * len(alphas) + ai
            seed = derive_seed(base_seed, k + 1)
            row = {"index": k, "seed": seed, "scene": path.name, "config_hash": cfg.hash(),
                   "scenario": test_scenario(cfg, alpha).to_dict()}
            jobs.append((str(path), row, None, str(out)))
    rows = _run(jobs, cfg, mask, out, threads)
    for res in rows:
        if "error" in res:
            raise OSError(res["error"])
    manifest = DatasetManifest(header, rows, out)
    manifest.write()
    return manifest


def regenerate_item(manifest: DatasetManifest, index: int,
                    camera: Camera | None = None) -> tuple[SensorImage, np.ndarray]:
    """Re-render one item from its manifest row."""
    cfg = manifest.config()
    if camera is None:
        camera = Camera(cfg, manifest.load_mask(), threads=1)
    row = manifest.items[index]
    scene = Path(manifest.header["scene_dir"]) / row["scene"]
    s, gt, _ = _render_item(camera, cfg, scene, row, manifest.header.get("downsample"))
    return s, gt


def verify_items(manifest: DatasetManifest, indices) -> dict[int, bool]:
    """Bit-exact comparison of regenerated items against the stored files."""
    camera = Camera(manifest.config(), manifest.load_mask(), threads=1)
    out = {}
    for k in indices:
        s, gt = regenerate_item(manifest, k, camera)
        stored_s, _ = manifest.load_pair(manifest.items[k])
        stored_gt = io.read_image(manifest.root / manifest.items[k]["files"]["gt"])
        out[k] = bool(np.array_equal(s.counts, stored_s.counts)
                      and np.array_equal(io.rgb_to_u16(gt), stored_gt))
    return out


def iter_pairs(scenes: list[np.ndarray], mask: HeightMap, dist: ScenarioDistribution,
               cfg: SimConfig, base_seed: int = 0) -> Iterator[tuple[SensorImage, np.ndarray]]:
    """Endless in-memory stream of randomly conditioned pairs."""
    camera = Camera(cfg, mask)
    k = 0
    while True:
        seed = derive_seed(base_seed, k + 1)
        rgb, _ = crop_scene(scenes[k % len(scenes)], (cfg.sensor_res[1], cfg.sensor_res[0]),
                            rng_for(seed, 1))
        yield _capture(camera, cfg, rgb, sample_scenario(dist, seed), seed, None)
        k += 1


# -- evaluation ----------------------------------------------------------------

def evaluate_manifest(manifest: DatasetManifest, mask: HeightMap, cfg: SimConfig,
                      params: RestoreParams | None = None) -> dict:
    """Restore every item and aggregate quality metrics per laser strength."""
    missing = [str(manifest.root / f) for it in manifest.items for f in it["files"].values()
               if not (manifest.root / f).exists()]
    if missing:
        raise FileNotFoundError("missing dataset files: " + ", ".join(missing))
    restorer = Restorer(cfg, mask, params)
    strata: dict[float, dict[str, list]] = {}
    rows = []
    for it in manifest.items:
        s, gt = manifest.load_pair(it)
        restored = restorer.restore(s)
        raw = restorer.raw(s)
        q_res = quality_report(restored, gt)
        q_raw = quality_report(raw, gt)
        alpha = float(it["scenario"]["laser"]["alpha_l"])
        bucket = strata.setdefault(alpha, {"restored_l1": [], "raw_l1": [], "restored_psnr": [],
                                           "raw_psnr": [], "restored_charbonnier": []})
        bucket["restored_l1"].append(q_res["l1"])
        bucket["raw_l1"].append(q_raw["l1"])
        bucket["restored_psnr"].append(q_res["psnr"])
        bucket["raw_psnr"].append(q_raw["psnr"])
        bucket["restored_charbonnier"].append(q_res["charbonnier_fft"])
        rows.append({"index": it["index"], "alpha_l": alpha, "restored_l1": q_res["l1"],
                     "raw_l1": q_raw["l1"], "restored_psnr": q_res["psnr"],
                     "raw_psnr": q_raw["psnr"]})
    summary = {
        f"{a:g}": {k: float(np.mean(v)) for k, v in b.items()} | {"count": len(b["raw_l1"])}
        for a, b in sorted(strata.items())
    }
    overall = {}
    if rows:
        overall = {
            "restored_l1": float(np.mean([r["restored_l1"] for r in rows])),
            "raw_l1": float(np.mean([r["raw_l1"] for r in rows])),
        }
    return {"mask_hash": mask.hash(), "config_hash": cfg.hash(),
            "params": (params or restorer.params).to_dict(), "strata": summary,
            "overall": overall, "items": rows}
