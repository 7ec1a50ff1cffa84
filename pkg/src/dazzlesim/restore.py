"""Classical restoration: harmonic inpainting plus Wiener deconvolution.

Counts are first mapped back to scene units using the capture metadata
(black level, gain, exposure and the background anchoring scale), so that a
white scene reads 1 in every channel. Deconvolution uses per-channel
effective OTFs and a gradient (1/f^2 image spectrum) Wiener prior; a 3x3
colour-correction matrix then maps sensor channels to linear RGB.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft as sfft
from scipy import ndimage, sparse
from scipy.sparse.linalg import LinearOperator, cg

from .camera import SensorImage, photon_factor, sensor_sensitivity
from .config import SimConfig, WavelengthGrid
from .optics import HeightMap, PsfStack, build_psf_stack, crop_centered, embed_centered, otf
from .spectral import SpectralCurve, daylight_illuminant, lift_rgb_to_hsi

log = logging.getLogger(__name__)

RgbImage = np.ndarray


class RestoreMismatchError(ValueError):
    """Capture metadata does not match the configuration or mask supplied."""


class InpaintWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RestoreParams:
    wiener_reg: tuple[float, float, float] = (0.03, 0.03, 0.03)
    inpaint_iters: int = 2000
    inpaint_tol: float = 1e-6
    dilate_radius: int = 2
    prior: str = "gradient"  # "gradient" (1/f^2 spectrum) or "white" (scalar)
    boundary: str = "exact"  # "exact" (cropped forward model) or "circular"
    cg_iters: int = 150
    masked_weight: float = 0.0  # data weight of inpainted pixels in the deconvolution

    def __post_init__(self):
        reg = tuple(float(r) for r in np.broadcast_to(self.wiener_reg, (3,)))
        object.__setattr__(self, "wiener_reg", reg)
        if min(reg) <= 0:
            raise ValueError("wiener_reg must be > 0")
        if self.inpaint_iters < 0 or self.cg_iters < 0 or self.dilate_radius < 0:
            raise ValueError("iteration counts and dilate_radius must be >= 0")
        if self.prior not in ("gradient", "white"):
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.boundary not in ("exact", "circular"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if not 0 <= self.masked_weight <= 1:
            raise ValueError("masked_weight must lie in [0, 1]")

    def replace(self, **kw) -> "RestoreParams":
        d = self.to_dict()
        d.update(kw)
        return RestoreParams(**d)

    def to_dict(self) -> dict:
        return {"wiener_reg": list(self.wiener_reg), "inpaint_iters": self.inpaint_iters,
                "inpaint_tol": self.inpaint_tol, "dilate_radius": self.dilate_radius,
                "prior": self.prior, "boundary": self.boundary, "cg_iters": self.cg_iters,
                "masked_weight": self.masked_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "RestoreParams":
        d = dict(d)
        d["wiener_reg"] = tuple(d["wiener_reg"])
        return cls(**d)


def channel_weights(grid: WavelengthGrid, illuminant: SpectralCurve,
                    cmf: np.ndarray | None = None) -> np.ndarray:
    """(3, bands) band weights per channel, each row summing to 1.

    Weight = channel sensitivity x illuminant x wavelength (photons per joule).
    """
    cmf = sensor_sensitivity(grid) if cmf is None else np.asarray(cmf, dtype=float)
    if cmf.shape != (3, len(grid)) or illuminant.grid != grid:
        raise ValueError("cmf / illuminant do not match the wavelength grid")
    w = cmf * illuminant.values * grid.array
    return w / w.sum(axis=1, keepdims=True)


def effective_channel_otf(psf: PsfStack, illuminant: SpectralCurve,
                          cmf: np.ndarray | None = None, shape=None) -> np.ndarray:
    """(3, H, W) weighted average of unit-DC band OTFs."""
    if illuminant.grid != psf.grid:
        raise ValueError("illuminant and PSF stack use different grids")
    w = channel_weights(psf.grid, illuminant, cmf)
    band = otf(psf.psf, shape)
    band = band / band[:, :1, :1].real
    return np.tensordot(w, band, axes=(1, 0))


def _neighbour_offsets():
    return ((1, 0), (-1, 0), (0, 1), (0, -1))


def inpaint_harmonic(img: np.ndarray, mask: np.ndarray, iters: int = 2000,
                     tol: float = 1e-6) -> tuple[np.ndarray, bool]:
    """Fill ``mask`` by discrete Laplace interpolation from the known pixels.

    Returns (filled, degenerate). ``degenerate`` is True when nothing is known,
    in which case the mask is mean-filled with 0.5.
    """
    img = np.asarray(img, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    out = img.copy()
    if not mask.any():
        return out, False
    if mask.all():
        out[...] = 0.5
        return out, True
    h, w = mask.shape
    idx = -np.ones(mask.shape, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    n = ys.size
    idx[ys, xs] = np.arange(n)
    chans = img.reshape(h, w, -1)
    rows, cols, vals = [], [], []
    deg = np.zeros(n)
    rhs = np.zeros((n, chans.shape[2]))
    for dy, dx in _neighbour_offsets():
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        deg += ok
        nyo, nxo, src = ny[ok], nx[ok], np.flatnonzero(ok)
        inner = mask[nyo, nxo]
        rows.append(src[inner])
        cols.append(idx[nyo[inner], nxo[inner]])
        vals.append(-np.ones(inner.sum()))
        np.add.at(rhs, src[~inner], chans[nyo[~inner], nxo[~inner]])
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(deg)
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    filled = out.reshape(h, w, -1)
    for c in range(chans.shape[2]):
        x0 = np.full(n, chans[..., c][~mask].mean())
        sol, info = cg(A, rhs[:, c], x0=x0, rtol=tol, atol=0.0, maxiter=max(iters, 1))
        if info > 0:
            log.debug("harmonic inpainting stopped after %d iterations", iters)
        filled[ys, xs, c] = sol
    return out, False


def saturation_region(s: SensorImage, radius: int) -> np.ndarray:
    m = s.saturated_pixels
    if radius > 0 and m.any():
        m = ndimage.binary_dilation(m, iterations=radius)
    return m


def inpaint_saturated(s: SensorImage, params: RestoreParams) -> RgbImage:
    """Counts / s_sat with the dilated saturated region harmonically filled."""
    img = s.counts.astype(float) / s.s_sat
    filled, degenerate = inpaint_harmonic(img, saturation_region(s, params.dilate_radius),
                                          params.inpaint_iters, params.inpaint_tol)
    if degenerate:
        warnings.warn("whole image saturated; mean-filled", InpaintWarning, stacklevel=2)
    return filled


def _prior_spectrum(shape) -> np.ndarray:
    ky = 2 - 2 * np.cos(2 * np.pi * np.fft.fftfreq(shape[0]))
    kx = 2 - 2 * np.cos(2 * np.pi * np.fft.fftfreq(shape[1]))
    return ky[:, None] + kx[None, :]


def wiener_deconvolve(x: RgbImage, otfs: np.ndarray, params: RestoreParams) -> RgbImage:
    """Closed-form circular Wiener filter per channel, clamped to [0, 1].

    conj(H) X / (|H|^2 + reg * R) with R = 1 for the white prior and the
    discrete Laplacian power spectrum for the gradient prior.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:2]
    otfs = np.broadcast_to(otfs, (3,) + shape)
    r = np.ones(shape) if params.prior == "white" else _prior_spectrum(shape)
    out = np.empty_like(x)
    for c in range(3):
        h = otfs[c]
        spec = np.conj(h) * np.fft.fft2(x[..., c]) / (np.abs(h) ** 2 + params.wiener_reg[c] * r)
        out[..., c] = np.fft.ifft2(spec).real
    return np.clip(np.nan_to_num(out), 0.0, 1.0)


def _grad_penalty(x: np.ndarray) -> np.ndarray:
    """D^T D x for forward differences with Neumann ends."""
    out = np.zeros_like(x)
    gx = np.diff(x, axis=1)
    gy = np.diff(x, axis=0)
    out[:, :-1] -= gx
    out[:, 1:] += gx
    out[:-1, :] -= gy
    out[1:, :] += gy
    return out


def deconvolve_exact(y: np.ndarray, h: np.ndarray, weight: np.ndarray, reg: float,
                     prior: str, iters: int, x0: np.ndarray | None = None) -> np.ndarray:
    """Wiener objective on the cropped forward model, solved by CG.

    Minimises ||sqrt(weight) (crop(h * x) - y)||^2 + reg * P(x) with x
    supported on the sensor; ``h`` is the OTF on the padded grid.
    """
    shape = y.shape
    pad = h.shape
    hr = h[:, : pad[1] // 2 + 1]
    hc = np.conj(hr)

    def fwd(v):
        return crop_centered(sfft.irfft2(hr * sfft.rfft2(embed_centered(v, pad)), pad), shape)

    def adj(v):
        return crop_centered(sfft.irfft2(hc * sfft.rfft2(embed_centered(v, pad)), pad), shape)

    pen = _grad_penalty if prior == "gradient" else (lambda v: v)

    def matvec(v):
        v = v.reshape(shape)
        return (adj(weight * fwd(v)) + reg * pen(v)).ravel()

    n = y.size
    A = LinearOperator((n, n), matvec=matvec, dtype=float)
    b = adj(weight * y).ravel()
    x, _ = cg(A, b, x0=None if x0 is None else x0.ravel(), rtol=1e-7, atol=0.0,
              maxiter=max(iters, 1))
    return x.reshape(shape)


@lru_cache(maxsize=16)
def _colour_matrix(grid: WavelengthGrid, weights_key: bytes) -> np.ndarray:
    w = np.frombuffer(weights_key).reshape(3, len(grid))
    g = np.linspace(0.0, 1.0, 6)
    cal = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    spectra = lift_rgb_to_hsi(cal, grid).data.reshape(-1, len(grid))
    m, *_ = np.linalg.lstsq(spectra @ w.T, cal, rcond=None)
    return m


def colour_matrix(grid: WavelengthGrid, weights: np.ndarray) -> np.ndarray:
    """3x3 matrix M with rgb ~= channels @ M, fitted on lifted calibration colours."""
    return _colour_matrix(grid, np.ascontiguousarray(weights, dtype=float).tobytes())


class Restorer:
    """Restoration for one (config, mask) pair; caches PSFs, OTFs and colour matrices."""

    def __init__(self, cfg: SimConfig, mask: HeightMap | None = None,
                 params: RestoreParams | None = None, threads: int | None = None,
                 psf: PsfStack | None = None):
        self.cfg = cfg
        self.mask = HeightMap.flat(cfg) if mask is None else mask
        self.params = RestoreParams() if params is None else params
        self.psf = build_psf_stack(self.mask, cfg, threads) if psf is None else psf
        self.pad = (2 * cfg.sensor_res[1], 2 * cfg.sensor_res[0])
        self._otf_cache: dict = {}

    def _illuminant(self, s: SensorImage) -> SpectralCurve:
        values = s.metadata.get("illumination", {}).get("illuminant")
        if values is None:
            return daylight_illuminant(self.cfg.grid)
        return SpectralCurve(self.cfg.grid, np.asarray(values, dtype=float))

    def _check(self, s: SensorImage) -> None:
        meta = s.metadata
        if meta.get("config_hash") != self.cfg.hash():
            raise RestoreMismatchError("image was captured with a different configuration")
        if meta.get("mask_hash") != self.mask.hash():
            raise RestoreMismatchError("image was captured with a different mask")

    def channel_otfs(self, illuminant: SpectralCurve, shape=None) -> tuple[np.ndarray, np.ndarray]:
        shape = self.pad if shape is None else tuple(shape)
        key = (illuminant.values.tobytes(), shape)
        if key not in self._otf_cache:
            w = channel_weights(self.cfg.grid, illuminant)
            self._otf_cache[key] = (w, effective_channel_otf(self.psf, illuminant, shape=shape))
        return self._otf_cache[key]

    def normalise(self, s: SensorImage) -> np.ndarray:
        """Counts -> channel values in scene units (white scene reads ~1)."""
        cfg = self.cfg
        meta = s.metadata
        noise = meta.get("noise", {})
        e = s.counts.astype(float)
        if not noise.get("quantization", True):
            e = e + 0.5  # floor without dither is biased by half a count
        e = e * cfg.gain
        if noise.get("read", True):
            e = e - noise.get("mu_r", cfg.read_noise_mean)
        if noise.get("dark", True):
            e = e - noise.get("mu_c", cfg.dark_current)
        illum = self._illuminant(s)
        scale = meta.get("background_scale", 0.0)
        if scale <= 0:
            return np.zeros_like(e)
        phys = (cfg.quantum_efficiency * scale * sensor_sensitivity(cfg.grid) * illum.values
                * photon_factor(cfg, meta.get("exposure_time")))
        return e / phys.sum(axis=1)

    def _to_rgb(self, chans: np.ndarray, s: SensorImage) -> RgbImage:
        w, _ = self.channel_otfs(self._illuminant(s))
        rgb = chans @ colour_matrix(self.cfg.grid, w)
        return np.clip(np.nan_to_num(rgb), 0.0, 1.0)

    def raw(self, s: SensorImage) -> RgbImage:
        """Photometric normalisation and colour correction only."""
        self._check(s)
        return self._to_rgb(self.normalise(s), s)

    def restore(self, s: SensorImage, params: RestoreParams | None = None) -> RgbImage:
        p = self.params if params is None else params
        self._check(s)
        y = self.normalise(s)
        region = saturation_region(s, p.dilate_radius)
        filled, degenerate = inpaint_harmonic(y, region, p.inpaint_iters, p.inpaint_tol)
        if degenerate:
            warnings.warn("whole image saturated; mean-filled", InpaintWarning, stacklevel=2)
            return self._to_rgb(filled, s)
        illum = self._illuminant(s)
        if p.boundary == "circular":
            _, otfs = self.channel_otfs(illum, y.shape[:2])
            # wiener_deconvolve clamps to [0, 1]; scene units already span that range
            est = wiener_deconvolve(filled, otfs, p)
        else:
            _, otfs = self.channel_otfs(illum)
            weight = np.where(region, p.masked_weight, 1.0)
            est = np.stack([deconvolve_exact(filled[..., c], otfs[c], weight, p.wiener_reg[c],
                                             p.prior, p.cg_iters, filled[..., c])
                            for c in range(3)], axis=-1)
        return self._to_rgb(est, s)


def restore_pipeline(s: SensorImage, mask: HeightMap, cfg: SimConfig,
                     params: RestoreParams | None = None) -> RgbImage:
    """Normalise, inpaint, deconvolve and colour-correct one capture."""
    return Restorer(cfg, mask, params).restore(s)
