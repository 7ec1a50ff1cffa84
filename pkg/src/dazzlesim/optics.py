"""Pupil-plane DOE model and focal-plane PSFs.

The focal-plane field of a lens of focal length f is the Fourier transform
of the pupil field evaluated at spatial frequency x / (lambda f). Because the
pupil pitch and the sensor pitch differ, the transform is a *scaled* DFT. We
evaluate it separably as two matrix products (rows then columns),

    S = E_v @ P @ E_u.T,   E_u[m, n] = exp(-2j pi x_m u_n / (lambda f)),

which is exact at any output pitch and trivially differentiable. PSFs are
expressed as the fraction of the clear-aperture energy landing on each sensor
pixel, so a clear aperture integrates to 1 over the unbounded sensor grid.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .config import SimConfig, WavelengthGrid


class PropagationError(ValueError):
    pass


@dataclass
class HeightMap:
    """DOE surface heights in metres on an (N_v, N_u) pupil grid."""

    heights: np.ndarray
    pitch: float
    h_max: float

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        if self.heights.ndim != 2:
            raise ValueError("height map must be two-dimensional")
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("height map contains non-finite values")
        tol = 1e-12 * self.h_max
        if self.heights.min() < -tol or self.heights.max() > self.h_max + tol:
            raise ValueError("heights must lie in [0, h_max]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @classmethod
    def flat(cls, cfg: SimConfig) -> "HeightMap":
        return cls(np.zeros(cfg.pupil_res[::-1]), cfg.pupil_pitch, cfg.doe_h_max)

    @classmethod
    def random(cls, cfg: SimConfig, rng: np.random.Generator, fraction: float = 0.05) -> "HeightMap":
        h = rng.uniform(0.0, fraction * cfg.doe_h_max, size=cfg.pupil_res[::-1])
        return cls(h, cfg.pupil_pitch, cfg.doe_h_max)

    def with_heights(self, heights: np.ndarray) -> "HeightMap":
        return HeightMap(heights, self.pitch, self.h_max)

    def to_float32(self) -> "HeightMap":
        """Round to the on-disk precision so a save/load round trip is exact."""
        h = np.clip(self.heights, 0.0, self.h_max).astype(np.float32)
        top = np.float32(self.h_max)
        if float(top) > self.h_max:
            top = np.nextafter(top, np.float32(0.0))
        return self.with_heights(np.minimum(h, top).astype(float))

    def hash(self) -> str:
        m = hashlib.sha256()
        m.update(np.ascontiguousarray(self.heights, dtype="<f8").tobytes())
        m.update(np.array([self.pitch, self.h_max], dtype="<f8").tobytes())
        m.update(repr(self.heights.shape).encode())
        return m.hexdigest()[:16]


@dataclass
class PupilField:
    field: np.ndarray
    wavelength: float
    pitch: float


@dataclass
class PsfStack:
    """Per-band sensor-grid PSFs, shape (bands, N_y, N_x), centred at index N//2."""

    psf: np.ndarray
    grid: WavelengthGrid
    pitch: float
    total_energy: np.ndarray  # unbounded-grid energy per band
    peaks: np.ndarray = field(init=False)
    energy: np.ndarray = field(init=False)  # in-sensor energy per band

    def __post_init__(self):
        self.peaks = self.psf.reshape(len(self.psf), -1).max(axis=1)
        self.energy = self.psf.reshape(len(self.psf), -1).sum(axis=1)

    def band(self, lam: float) -> int:
        return self.grid.index_of(lam, tol=1e-12)

    def to_cube_array(self) -> np.ndarray:
        """(N_y, N_x, bands) layout for export as a spectral cube."""
        return np.moveaxis(self.psf, 0, -1)


def pupil_coords(n: int, pitch: float) -> np.ndarray:
    """Sample positions symmetric about the optical axis."""
    return (np.arange(n) - (n - 1) / 2.0) * pitch


def sensor_coords(n: int, pitch: float, offset: float = 0.0) -> np.ndarray:
    """Sensor sample positions; index n // 2 sits on the optical axis."""
    return (np.arange(n) - n // 2) * pitch + offset


def aperture(cfg: SimConfig) -> np.ndarray:
    nu, nv = cfg.pupil_res
    radius = cfg.aperture_diameter / 2.0
    if nu * cfg.pupil_pitch < cfg.aperture_diameter or nv * cfg.pupil_pitch < cfg.aperture_diameter:
        raise PropagationError(
            f"pupil grid {nu}x{nv} at {cfg.pupil_pitch * 1e6:.2f} um spans "
            f"{nu * cfg.pupil_pitch * 1e3:.2f} mm, smaller than the "
            f"{cfg.aperture_diameter * 1e3:.2f} mm aperture")
    u = pupil_coords(nu, cfg.pupil_pitch)
    v = pupil_coords(nv, cfg.pupil_pitch)
    return (u[None, :] ** 2 + v[:, None] ** 2 <= radius ** 2).astype(float)


def doe_phase(h: HeightMap, lam: float, cfg: SimConfig) -> np.ndarray:
    return 2.0 * np.pi / lam * cfg.delta_n(lam) * h.heights


def pupil_function(h: HeightMap, lam: float, cfg: SimConfig) -> PupilField:
    amp = aperture(cfg)
    if amp.shape != h.shape:
        raise ValueError(f"height map shape {h.shape} does not match pupil grid {amp.shape}")
    return PupilField(amp * np.exp(1j * doe_phase(h, lam, cfg)), lam, cfg.pupil_pitch)


@lru_cache(maxsize=256)
def _kernel(n_in: int, pitch_in: float, n_out: int, pitch_out: float, lam_f: float,
            offset: float) -> np.ndarray:
    u = pupil_coords(n_in, pitch_in)
    x = sensor_coords(n_out, pitch_out, offset)
    k = np.exp(-2j * np.pi * np.outer(x, u) / lam_f)
    k.setflags(write=False)
    return k


def transfer_matrices(cfg: SimConfig, lam: float, shape=None, pitch=None, offset=(0.0, 0.0)):
    """(E_v, E_u) such that the focal field is E_v @ P @ E_u.T."""
    nx, ny = cfg.sensor_res if shape is None else (shape[1], shape[0])
    pitch = cfg.sensor_pitch if pitch is None else pitch
    nu, nv = cfg.pupil_res
    lam_f = lam * cfg.focal_length
    if shape is None and pitch == cfg.sensor_pitch:
        ratio = max(nx, ny) * pitch * cfg.pupil_pitch / lam_f
        if ratio > 1.0:
            raise PropagationError(
                f"sensor window exceeds the alias-free focal field at {lam * 1e9:.1f} nm: "
                f"N_x dx du / (lambda f) = {ratio:.3f} > 1")
    e_u = _kernel(nu, cfg.pupil_pitch, nx, pitch, lam_f, float(offset[0]))
    e_v = _kernel(nv, cfg.pupil_pitch, ny, pitch, lam_f, float(offset[1]))
    return e_v, e_u


def psf_scale(cfg: SimConfig, lam: float, pitch=None) -> float:
    """Converts |S|^2 to fraction of clear-aperture energy per output sample."""
    pitch = cfg.sensor_pitch if pitch is None else pitch
    n_ap = aperture(cfg).sum()
    return (cfg.pupil_pitch * pitch / (lam * cfg.focal_length)) ** 2 / n_ap


def focal_field(pupil: PupilField, cfg: SimConfig, shape=None, pitch=None,
                offset=(0.0, 0.0)) -> np.ndarray:
    e_v, e_u = transfer_matrices(cfg, pupil.wavelength, shape, pitch, offset)
    return e_v @ pupil.field @ e_u.T


def propagate_psf(pupil: PupilField, cfg: SimConfig, shape=None, pitch=None,
                  offset=(0.0, 0.0)) -> np.ndarray:
    """Sensor-plane intensity of one band.

    ``shape``/``pitch``/``offset`` override the sensor sampling (e.g. to
    oversample a profile); the normalisation stays energy-per-sample.
    """
    s = focal_field(pupil, cfg, shape, pitch, offset)
    return (s.real ** 2 + s.imag ** 2) * psf_scale(cfg, pupil.wavelength, pitch)


def unbounded_energy(pupil: PupilField, cfg: SimConfig) -> float:
    """PSF energy over one full period of the focal field.

    Evaluated with a plain FFT, i.e. on the native grid of pitch
    lambda f / (N du) that tiles the period exactly.
    """
    f = np.fft.fft2(pupil.field)
    n = pupil.field.size
    return float(np.sum(f.real ** 2 + f.imag ** 2) / (n * aperture(cfg).sum()))


def build_psf_stack(h: HeightMap, cfg: SimConfig, threads: int | None = None) -> PsfStack:
    grid = cfg.grid

    def one(lam):
        pupil = pupil_function(h, lam, cfg)
        return propagate_psf(pupil, cfg), unbounded_energy(pupil, cfg)

    if threads == 1 or len(grid) == 1:
        results = [one(lam) for lam in grid.lambdas]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, grid.lambdas))
    psf = np.stack([r[0] for r in results])
    total = np.array([r[1] for r in results])
    return PsfStack(psf, grid, cfg.sensor_pitch, total)


def embed_centered(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-pad ``a`` so that its centre index (n // 2) lands at shape // 2."""
    out = np.zeros(a.shape[:-2] + tuple(shape), dtype=a.dtype)
    oy = shape[0] // 2 - a.shape[-2] // 2
    ox = shape[1] // 2 - a.shape[-1] // 2
    out[..., oy:oy + a.shape[-2], ox:ox + a.shape[-1]] = a
    return out


def crop_centered(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    oy = a.shape[-2] // 2 - shape[0] // 2
    ox = a.shape[-1] // 2 - shape[1] // 2
    return a[..., oy:oy + shape[0], ox:ox + shape[1]]


def otf(psf: np.ndarray, shape=None) -> np.ndarray:
    """Transfer function of centred PSF(s); DC equals the PSF energy."""
    psf = np.asarray(psf, dtype=float)
    if shape is not None:
        psf = embed_centered(psf, shape)
    return np.fft.fft2(np.fft.ifftshift(psf, axes=(-2, -1)))


def smooth_heights(theta: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian reparameterisation; zero-padded so the operator is self-adjoint."""
    if sigma <= 0:
        return theta
    return ndimage.gaussian_filter(theta, sigma, mode="constant")


def half_ring_mask(cfg: SimConfig, r_inner: float | None = None, r_outer: float | None = None,
                   h_step: float | None = None, design_wavelength: float = 550e-9) -> HeightMap:
    """Half-annulus step mask: h_step inside {r_inner <= r <= r_outer, v > 0}.

    Radii are in metres and default to half and full aperture radius; the
    default step gives a pi phase delay at ``design_wavelength``.
    """
    radius = cfg.aperture_diameter / 2.0
    r_inner = 0.5 * radius if r_inner is None else r_inner
    r_outer = radius if r_outer is None else r_outer
    if not (0 < r_inner <= r_outer <= radius * (1 + 1e-12)):
        raise ValueError("half-ring radii must satisfy 0 < r_inner <= r_outer <= R")
    if h_step is None:
        h_step = design_wavelength / (2.0 * cfg.delta_n(design_wavelength))
    if not 0 <= h_step <= cfg.doe_h_max:
        raise ValueError("h_step exceeds the DOE height range")
    nu, nv = cfg.pupil_res
    u = pupil_coords(nu, cfg.pupil_pitch)[None, :]
    v = pupil_coords(nv, cfg.pupil_pitch)[:, None]
    r = np.hypot(u, v)
    inside = (r >= r_inner) & (r <= r_outer) & (v > 0) & (r_inner < r_outer)
    return HeightMap(np.where(inside, h_step, 0.0), cfg.pupil_pitch, cfg.doe_h_max)
