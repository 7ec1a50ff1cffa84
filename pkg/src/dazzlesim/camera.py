"""Sensor-plane irradiance, flare and the photon-to-count noise chain.

Irradiance cubes live on a zero-padded computational grid twice the sensor
size so that scene blur is a linear (not circular) convolution; the final
counts are centre-cropped back to the sensor.

Strengths are anchored on the uncoded (flat-mask) camera at the level of
channel electrons: ``alpha = 1`` means the brightest uncoded pixel collects
exactly one full well in its brightest channel. With 5 or 31 bands summed
into each channel this is the only anchoring under which the uncoded laser
saturates a single pixel for every laser wavelength.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import CONSTANTS, SimConfig, WavelengthGrid
from .metrics import i_sat
from .optics import HeightMap, PsfStack, build_psf_stack, crop_centered, embed_centered, otf
from .spectral import (SpectralCube, SpectralCurve, _table, cmf_matrix, daylight_illuminant,
                       laser_profile)

__all__ = ["LaserSpec", "IlluminationSpec", "NoiseSpec", "FlareParams", "SensorImage", "Camera",
           "sensor_sensitivity", "scene_irradiance", "laser_irradiance", "add_flare", "photons",
           "expose", "digitize"]


@dataclass(frozen=True)
class LaserSpec:
    lambda_l: float
    alpha_l: float = 0.0
    n_l: tuple[float, float] = (0.0, 0.0)  # (n_u, n_v) direction components
    fwhm: float = 10e-9

    def __post_init__(self):
        if not (np.isfinite(self.alpha_l) and self.alpha_l >= 0):
            raise ValueError("alpha_l must be >= 0")
        object.__setattr__(self, "n_l", tuple(float(v) for v in self.n_l))
        if self.fwhm <= 0:
            raise ValueError("laser fwhm must be positive")

    def shift(self, cfg: SimConfig) -> tuple[float, float]:
        """Sensor-plane footprint offset (dx, dy) in metres."""
        return cfg.focal_length * self.n_l[0], cfg.focal_length * self.n_l[1]

    def to_dict(self) -> dict:
        return {"lambda_l": self.lambda_l, "alpha_l": self.alpha_l, "n_l": list(self.n_l),
                "fwhm": self.fwhm}

    @classmethod
    def from_dict(cls, d: dict) -> "LaserSpec":
        return cls(d["lambda_l"], d["alpha_l"], tuple(d["n_l"]), d.get("fwhm", 10e-9))


@dataclass(frozen=True)
class IlluminationSpec:
    alpha_b: float = 0.7
    illuminant: SpectralCurve | None = None  # None means D65 on the run's grid

    def __post_init__(self):
        if not (np.isfinite(self.alpha_b) and self.alpha_b >= 0):
            raise ValueError("alpha_b must be >= 0")

    def curve(self, grid: WavelengthGrid) -> SpectralCurve:
        if self.illuminant is None:
            return daylight_illuminant(grid)
        if self.illuminant.grid != grid:
            raise ValueError("illuminant grid does not match the configuration")
        return self.illuminant

    def to_dict(self) -> dict:
        illum = None if self.illuminant is None else [float(v) for v in self.illuminant.values]
        return {"alpha_b": self.alpha_b, "illuminant": illum}

    @classmethod
    def from_dict(cls, d: dict, grid: WavelengthGrid) -> "IlluminationSpec":
        illum = d.get("illuminant")
        return cls(d["alpha_b"], None if illum is None else SpectralCurve(grid, np.array(illum)))


@dataclass(frozen=True)
class NoiseSpec:
    """Noise coefficients (electrons) and per-source switches.

    Photon noise is Gaussian with mean ``mean_scale * mu_p`` and standard
    deviation ``c2 * sqrt(mu_p)``. ``c1`` is carried as metadata; setting
    ``literal_c1`` uses it as the mean scale instead.
    """

    c1: float = 0.2
    c2: float = 1.0
    mu_c: float = 0.002
    mu_r: float = 390.0
    sigma_r: float = 10.5
    mean_scale: float = 1.0
    literal_c1: bool = False
    photon: bool = True
    dark: bool = True
    read: bool = True
    quantization: bool = True

    def __post_init__(self):
        if self.c2 < 0 or self.sigma_r < 0 or self.mu_c < 0:
            raise ValueError("c2, sigma_r and mu_c must be non-negative")

    @classmethod
    def from_config(cls, cfg: SimConfig, **kw) -> "NoiseSpec":
        base = dict(mu_c=cfg.dark_current, mu_r=cfg.read_noise_mean, sigma_r=cfg.read_noise_std)
        base.update(kw)
        return cls(**base)

    @classmethod
    def disabled(cls, cfg: SimConfig | None = None) -> "NoiseSpec":
        spec = cls() if cfg is None else cls.from_config(cfg)
        return dataclasses.replace(spec, photon=False, dark=False, read=False, quantization=False)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


@dataclass(frozen=True)
class FlareParams:
    fraction: float = 0.05
    n_streaks: tuple[int, int] = (4, 12)
    streak_width: float = 0.8  # pixels
    streak_length: tuple[float, float] = (0.1, 0.4)  # fraction of the sensor width
    halo_radius: tuple[float, float] = (0.02, 0.08)
    haze_scale: float = 0.5

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError("flare fraction must lie in [0, 1]")


@dataclass
class SensorImage:
    """Digital counts (H, W, 3) with the metadata that produced them."""

    counts: np.ndarray
    s_sat: int
    metadata: dict = field(default_factory=dict)
    electrons: np.ndarray | None = None  # pre-gain, pre-clip; only when requested

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError("counts must be (H, W, 3)")
        if c.min(initial=0) < 0 or c.max(initial=0) > self.s_sat:
            raise ValueError("counts outside [0, s_sat]")
        self.counts = c.astype(np.uint16 if self.s_sat <= 65535 else np.uint32)

    @property
    def saturation_mask(self) -> np.ndarray:
        return self.counts == self.s_sat

    @property
    def saturated_pixels(self) -> np.ndarray:
        """(H, W) mask of pixels with any saturated channel."""
        return self.saturation_mask.any(axis=2)


def sensor_sensitivity(grid: WavelengthGrid) -> np.ndarray:
    """(3, bands) channel responses: CIE x-bar, y-bar, z-bar each scaled to unit peak."""
    peaks = _table("cie1931_2deg_cmf.csv")[:, 1:4].max(axis=0)
    return cmf_matrix(grid) / peaks[:, None]


def photon_factor(cfg: SimConfig, exposure_time: float | None = None) -> np.ndarray:
    """Per-band photons per (W/m^2) of irradiance on one pixel."""
    t = cfg.exposure_time if exposure_time is None else exposure_time
    return (cfg.grid.array * t * cfg.sensor_pitch ** 2
            / (CONSTANTS.planck * CONSTANTS.light_speed))


def photons(I: SpectralCube, cfg: SimConfig, exposure_time: float | None = None) -> SpectralCube:
    """Mean photon count per pixel per band for irradiance ``I`` (W/m^2)."""
    if np.any(I.data < 0):
        raise ValueError("irradiance must be non-negative")
    return SpectralCube(I.data * photon_factor(cfg, exposure_time), I.grid)


def _pad_shape(cfg: SimConfig) -> tuple[int, int]:
    nx, ny = cfg.sensor_res
    return 2 * ny, 2 * nx


def _anchor(uncoded_bands: np.ndarray, cfg: SimConfig) -> float:
    """Peak over channels and pixels of sum_i s_c(l_i) * I(l_i) / I_sat(l_i)."""
    rel = uncoded_bands / i_sat(cfg.grid.array, cfg)[:, None, None]
    chan = np.tensordot(sensor_sensitivity(cfg.grid), rel, axes=(1, 0))
    return float(chan.max())


def _band_otfs(psf: PsfStack, shape) -> np.ndarray:
    return otf(psf.psf, shape)


def _blur(b: np.ndarray, otfs: np.ndarray, shape) -> np.ndarray:
    """Linear convolution of each band of b (H, W, L) with the PSFs, on ``shape``."""
    out = np.empty(shape + (b.shape[2],))
    for i in range(b.shape[2]):
        spec = np.fft.fft2(embed_centered(b[..., i], shape))
        out[..., i] = np.fft.ifft2(spec * otfs[i]).real
    return np.maximum(out, 0.0)


def _scene_terms(b: SpectralCube, otfs, otfs0, illum: IlluminationSpec, cfg: SimConfig):
    shape = _pad_shape(cfg)
    if b.data.shape[:2] != (cfg.sensor_res[1], cfg.sensor_res[0]):
        raise ValueError(f"scene is {b.data.shape[:2]}, sensor is {cfg.sensor_res[::-1]}")
    if b.grid != cfg.grid:
        raise ValueError("scene grid does not match the configuration")
    weight = illum.curve(cfg.grid).values
    coded = _blur(b.data, otfs, shape) * weight
    if illum.alpha_b == 0 or not np.any(b.data):
        return SpectralCube(np.zeros_like(coded), cfg.grid), 0.0
    uncoded = coded if otfs0 is otfs else _blur(b.data, otfs0, shape) * weight
    scale = illum.alpha_b / _anchor(np.moveaxis(uncoded, 2, 0), cfg)
    return SpectralCube(coded * scale, cfg.grid), scale


def scene_irradiance(b: SpectralCube, psf: PsfStack, illum: IlluminationSpec, cfg: SimConfig,
                     psf_uncoded: PsfStack | None = None) -> SpectralCube:
    """Background irradiance on the padded grid (2H, 2W, bands), W/m^2."""
    if psf.grid != cfg.grid:
        raise ValueError("PSF grid does not match the configuration")
    shape = _pad_shape(cfg)
    if psf_uncoded is None:
        psf_uncoded = build_psf_stack(HeightMap.flat(cfg), cfg)
    otfs = _band_otfs(psf, shape)
    otfs0 = otfs if psf_uncoded is psf else _band_otfs(psf_uncoded, shape)
    return _scene_terms(b, otfs, otfs0, illum, cfg)[0]


def _laser_terms(laser: LaserSpec, psf: PsfStack, psf_uncoded: PsfStack, cfg: SimConfig):
    shape = _pad_shape(cfg)
    grid = cfg.grid
    t_l = laser_profile(laser.lambda_l, grid, laser.fwhm).values
    if laser.alpha_l == 0:
        return SpectralCube(np.zeros(shape + (len(grid),)), grid), 0.0, (0.0, 0.0)
    dx, dy = laser.shift(cfg)
    nx, ny = cfg.sensor_res
    px, py = dx / cfg.sensor_pitch, dy / cfg.sensor_pitch
    if abs(px) > nx or abs(py) > ny:
        raise ValueError(f"laser shift ({px:.1f}, {py:.1f}) px leaves the computational grid")
    scale = laser.alpha_l / _anchor(psf_uncoded.psf * t_l[:, None, None], cfg)
    out = np.empty(shape + (len(grid),))
    for i in range(len(grid)):
        if t_l[i] < 1e-300:
            out[..., i] = 0.0
            continue
        spec = otf(psf.psf[i], shape)
        if px or py:
            spec = ndimage.fourier_shift(spec, (py, px))
        img = np.fft.fftshift(np.fft.ifft2(spec).real)
        out[..., i] = np.maximum(img, 0.0) * (scale * t_l[i])
    return SpectralCube(out, grid), scale, (px, py)


def laser_irradiance(laser: LaserSpec, psf: PsfStack, psf_uncoded: PsfStack,
                     cfg: SimConfig) -> SpectralCube:
    """Laser irradiance on the padded grid, footprint centred at f * n_l."""
    if psf.grid != cfg.grid or psf_uncoded.grid != cfg.grid:
        raise ValueError("PSF grid does not match the configuration")
    return _laser_terms(laser, psf, psf_uncoded, cfg)[0]


def _flare_pattern(shape, centre, params: FlareParams, rng: np.random.Generator,
                   sensor_width: int) -> np.ndarray:
    ny, nx = shape
    yy, xx = np.mgrid[0:ny, 0:nx].astype(float)
    x = xx - centre[0]
    y = yy - centre[1]
    r = np.hypot(x, y)
    streaks = np.zeros(shape)
    for _ in range(int(rng.integers(params.n_streaks[0], params.n_streaks[1] + 1))):
        theta = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(*params.streak_length) * sensor_width
        along = x * np.cos(theta) + y * np.sin(theta)
        across = -x * np.sin(theta) + y * np.cos(theta)
        s = np.exp(-0.5 * (across / params.streak_width) ** 2 - np.abs(along) / length)
        streaks += s * rng.uniform(0.5, 1.0)
    halo_r = rng.uniform(*params.halo_radius) * sensor_width
    halo = np.exp(-0.5 * (r / halo_r) ** 2)
    haze = np.exp(-r / (params.haze_scale * sensor_width))
    parts = []
    for comp, w in ((streaks, 0.4), (halo, 0.4), (haze, 0.2)):
        total = comp.sum()
        parts.append(w * comp / total if total > 0 else 0.0)
    return sum(parts)


def add_flare(I: SpectralCube, laser: LaserSpec, flare_params: FlareParams,
              rng: np.random.Generator, centre: tuple[float, float] | None = None,
              sensor_width: int | None = None) -> SpectralCube:
    """Add streaks, halo and haze around the laser footprint.

    ``I`` is the laser irradiance; each band gains ``fraction`` of its own
    energy, so the flare carries the laser's spectral weighting.
    """
    if flare_params.fraction == 0 or laser.alpha_l == 0:
        return I
    shape = I.data.shape[:2]
    if centre is None:
        centre = (shape[1] // 2, shape[0] // 2)
    width = shape[1] // 2 if sensor_width is None else sensor_width
    pattern = _flare_pattern(shape, centre, flare_params, rng, width)
    energy = I.data.sum(axis=(0, 1))
    return SpectralCube(I.data + pattern[..., None] * (flare_params.fraction * energy), I.grid)


def _streams(seed: int) -> list[np.random.Generator]:
    """Independent generators for flare, photon, dark, read and quantisation noise."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(5)]


def _digitize(mu: np.ndarray, cfg: SimConfig, noise: NoiseSpec, rngs, keep_electrons: bool):
    rng_photon, rng_dark, rng_read, rng_quant = rngs
    if noise.photon:
        m_scale = noise.c1 if noise.literal_c1 else noise.mean_scale
        omega = np.maximum(rng_photon.normal(m_scale * mu, noise.c2 * np.sqrt(mu)), 0.0)
    else:
        omega = mu
    e = cfg.quantum_efficiency * omega
    if noise.dark:
        e = e + rng_dark.poisson(noise.mu_c, e.shape)
    if noise.read:
        e = e + rng_read.normal(noise.mu_r, noise.sigma_r, e.shape)
    electrons = e.copy() if keep_electrons else None
    s = np.clip(e, 0.0, cfg.full_well) / cfg.gain
    if noise.quantization:
        s = s + rng_quant.uniform(-0.5, 0.5, s.shape)
    return np.clip(np.floor(s), 0, cfg.s_sat).astype(np.int64), electrons


def digitize(mu: np.ndarray, cfg: SimConfig, noise: NoiseSpec, seed: int,
             keep_electrons: bool = False) -> SensorImage:
    """Noise and quantisation for mean channel photon counts ``mu`` (H, W, 3).

    Uses the same random streams as :meth:`Camera.expose` with that seed.
    """
    counts, electrons = _digitize(np.asarray(mu, dtype=float), cfg, noise, _streams(seed)[1:],
                                  keep_electrons)
    return SensorImage(counts, cfg.s_sat, {"seed": int(seed), "noise": noise.to_dict()},
                       electrons)


class Camera:
    """Simulated camera with a fixed DOE mask; caches PSFs and OTFs."""

    def __init__(self, cfg: SimConfig, mask: HeightMap | None = None,
                 threads: int | None = None, flare: FlareParams | None = None):
        self.cfg = cfg
        flat = HeightMap.flat(cfg)
        self.mask = flat if mask is None else mask
        if self.mask.shape != flat.shape:
            raise ValueError("mask shape does not match the pupil grid")
        self.flare = FlareParams() if flare is None else flare
        self.psf_uncoded = build_psf_stack(flat, cfg, threads)
        if np.array_equal(self.mask.heights, flat.heights):
            self.psf = self.psf_uncoded
        else:
            self.psf = build_psf_stack(self.mask, cfg, threads)
        shape = _pad_shape(cfg)
        self.otfs = _band_otfs(self.psf, shape)
        self.otfs_uncoded = (self.otfs if self.psf is self.psf_uncoded
                             else _band_otfs(self.psf_uncoded, shape))
        self.sensitivity = sensor_sensitivity(cfg.grid)

    def irradiance(self, b: SpectralCube, laser: LaserSpec, illum: IlluminationSpec,
                   rng: np.random.Generator):
        I_b, b_scale = _scene_terms(b, self.otfs, self.otfs_uncoded, illum, self.cfg)
        I_l, l_scale, (px, py) = _laser_terms(laser, self.psf, self.psf_uncoded, self.cfg)
        shape = I_l.data.shape[:2]
        centre = (shape[1] // 2 + px, shape[0] // 2 + py)
        I_l = add_flare(I_l, laser, self.flare, rng, centre, self.cfg.sensor_res[0])
        return SpectralCube(I_b.data + I_l.data, self.cfg.grid), b_scale, l_scale

    def expose(self, b: SpectralCube, laser: LaserSpec, illum: IlluminationSpec,
               noise: NoiseSpec, seed: int, exposure_time: float | None = None,
               keep_electrons: bool = False) -> SensorImage:
        cfg = self.cfg
        t = cfg.exposure_time if exposure_time is None else float(exposure_time)
        if not t > 0:
            raise ValueError("exposure time must be positive")
        streams = _streams(seed)
        I, b_scale, l_scale = self.irradiance(b, laser, illum, streams[0])
        p = I.data * photon_factor(cfg, t)
        mu = np.tensordot(p, self.sensitivity, axes=(2, 1))  # (2H, 2W, 3)
        mu = crop_centered(np.moveaxis(mu, 2, 0), (cfg.sensor_res[1], cfg.sensor_res[0]))
        mu = np.moveaxis(mu, 0, 2)
        counts, electrons = _digitize(mu, cfg, noise, streams[1:], keep_electrons)
        meta = {
            "laser": laser.to_dict(), "illumination": illum.to_dict(), "noise": noise.to_dict(),
            "seed": int(seed), "exposure_time": t, "config_hash": cfg.hash(),
            "mask_hash": self.mask.hash(), "background_scale": b_scale, "laser_scale": l_scale,
            "flare": dataclasses.asdict(self.flare),
        }
        return SensorImage(counts, cfg.s_sat, meta, electrons)


def expose(b: SpectralCube, h: HeightMap, laser: LaserSpec, illum: IlluminationSpec,
           noise: NoiseSpec, seed: int, cfg: SimConfig, exposure_time: float | None = None,
           keep_electrons: bool = False) -> SensorImage:
    """One-shot capture; build a :class:`Camera` to reuse PSFs across captures."""
    return Camera(cfg, h).expose(b, laser, illum, noise, seed, exposure_time, keep_electrons)
