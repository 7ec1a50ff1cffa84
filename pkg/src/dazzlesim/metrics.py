"""Saturation threshold, suppression ratios, DOE loss and image-quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import CONSTANTS, SimConfig
from .optics import PsfStack

CHARBONNIER_EPS = 1e-6


class DegenerateMaskError(ValueError):
    """The mask sends no light onto the sensor (BSR == 0)."""


def i_sat(lam, cfg: SimConfig, exposure_time: float | None = None):
    """Irradiance (W/m^2) that fills the full well within one exposure."""
    t = cfg.exposure_time if exposure_time is None else exposure_time
    lam = np.asarray(lam, dtype=float)
    return (cfg.full_well * CONSTANTS.planck * CONSTANTS.light_speed
            / (lam * t * cfg.sensor_pitch ** 2 * cfg.quantum_efficiency))


def smooth_peak(values: np.ndarray, beta: float, axis=None) -> np.ndarray:
    """Power mean of order ``beta``: exp(logsumexp(beta * log v) / beta) / N**(1/beta).

    A scale-free soft maximum bounded by max(v) from above.
    """
    v = np.asarray(values, dtype=float)
    m = v.max(axis=axis, keepdims=True)
    m = np.where(m > 0, m, 1.0)
    out = m * np.mean((v / m) ** beta, axis=axis, keepdims=True) ** (1.0 / beta)
    return np.squeeze(out, axis=axis) if axis is not None else float(out.item())


def _check_pair(coded: PsfStack, uncoded: PsfStack) -> None:
    if coded.grid != uncoded.grid or coded.psf.shape != uncoded.psf.shape:
        raise ValueError("PSF stacks were built from different configurations")


def lsr(coded: PsfStack, uncoded: PsfStack, lam: float) -> float:
    _check_pair(coded, uncoded)
    i = coded.band(lam)
    return float(coded.peaks[i] / uncoded.peaks[i])


def bsr(coded: PsfStack, uncoded: PsfStack, lam: float) -> float:
    _check_pair(coded, uncoded)
    i = coded.band(lam)
    return float(coded.energy[i] / uncoded.energy[i])


@dataclass
class SuppressionReport:
    wavelengths_nm: list[float]
    lsr: list[float]
    bsr: list[float]

    @property
    def mean_lsr(self) -> float:
        return float(np.mean(self.lsr))

    @property
    def max_lsr(self) -> float:
        return float(np.max(self.lsr))

    @property
    def mean_bsr(self) -> float:
        return float(np.mean(self.bsr))

    @property
    def max_bsr(self) -> float:
        return float(np.max(self.bsr))

    def to_dict(self) -> dict:
        return {
            "wavelengths_nm": self.wavelengths_nm, "lsr": self.lsr, "bsr": self.bsr,
            "mean_lsr": self.mean_lsr, "max_lsr": self.max_lsr,
            "mean_bsr": self.mean_bsr, "max_bsr": self.max_bsr,
        }


def suppression_report(coded: PsfStack, uncoded: PsfStack) -> SuppressionReport:
    _check_pair(coded, uncoded)
    return SuppressionReport(
        [float(x) for x in coded.grid.nm],
        [float(x) for x in coded.peaks / uncoded.peaks],
        [float(x) for x in coded.energy / uncoded.energy],
    )


def l_doe(coded: PsfStack, uncoded: PsfStack, mode: str = "report", beta: float = 50.0) -> float:
    """Sum of per-band LSR plus sum of per-band 1/BSR.

    ``mode="report"`` uses hard peaks; ``mode="smooth"`` uses the power-mean
    soft maximum that the optimiser differentiates.
    """
    _check_pair(coded, uncoded)
    if np.any(coded.energy <= 0):
        raise DegenerateMaskError("mask sends no energy onto the sensor")
    n = len(coded.psf)
    if mode == "report":
        ratios = coded.peaks / uncoded.peaks
    elif mode == "smooth":
        flat_c = coded.psf.reshape(n, -1)
        flat_u = uncoded.psf.reshape(n, -1)
        ratios = smooth_peak(flat_c, beta, axis=1) / smooth_peak(flat_u, beta, axis=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.sum(ratios) + np.sum(uncoded.energy / coded.energy))


def downsample_half(img: np.ndarray) -> np.ndarray:
    """Antialiased bicubic 2x reduction of an (H, W[, C]) float image."""
    return resize_bicubic(img, (max(1, img.shape[0] // 2), max(1, img.shape[1] // 2)))


def resize_bicubic(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Antialiased bicubic resize to ``shape`` = (H, W), per channel in float32."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return resize_bicubic(img[..., None], shape)[..., 0]
    out = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                      .resize((shape[1], shape[0]), Image.BICUBIC), dtype=float)
           for c in range(img.shape[2])]
    return np.stack(out, axis=-1)


def charbonnier_fft(est: np.ndarray, gt: np.ndarray, eps: float = CHARBONNIER_EPS) -> float:
    """Two-scale Charbonnier plus Fourier-magnitude L1 reconstruction loss."""
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    total = 0.0
    for level in (0, 1):
        if level == 1:
            est, gt = downsample_half(est), downsample_half(gt)
        d = est - gt
        total += float(np.sum(np.sqrt(d * d + eps)))
        total += float(np.sum(np.abs(np.fft.fft2(d, axes=(0, 1)))))
    return total


def charbonnier_floor(shape, eps: float = CHARBONNIER_EPS) -> float:
    """Value of :func:`charbonnier_fft` for identical images of ``shape``."""
    coarse = (max(1, shape[0] // 2), max(1, shape[1] // 2)) + tuple(shape[2:])
    return (math.prod(shape) + math.prod(coarse)) * math.sqrt(eps)


def quality_report(est: np.ndarray, gt: np.ndarray) -> dict:
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    d = est - gt
    mse = float(np.mean(d * d))
    return {
        "l1": float(np.mean(np.abs(d))),
        "psnr": math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse),
        "charbonnier_fft": charbonnier_fft(est, gt),
    }
