"""Spectral curves and RGB <-> hyperspectral conversion.

Colour-matching functions and D65 come from vendored CIE tables
(``data/*.csv``) and are linearly interpolated onto the run's wavelength grid.

Projection to RGB follows the CIE weighted sum with the ``k`` normalisation
(flat unit spectrum -> Y = 1), then applies the linear-sRGB primaries matrix
white-balanced so that a flat spectrum under the given illuminant maps to
(1, 1, 1). Lifting inverts this projection pixel by pixel with non-negative
smooth spectra.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .config import WavelengthGrid

RgbImage = np.ndarray  # (H, W, 3) float

# XYZ (D65 white) -> linear sRGB
SRGB_FROM_XYZ = np.array([
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
])

LIFT_BASIS_SIZE = 8
LIFT_BASIS_SIGMA_NM = 20.0

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class SpectralCurve:
    grid: WavelengthGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.grid),):
            raise ValueError("curve length does not match the wavelength grid")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("spectral curve values must be finite and >= 0")
        object.__setattr__(self, "values", v)


@dataclass
class SpectralCube:
    """Non-negative (H, W, bands) volume; the band axis is last (fastest)."""

    data: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[2] != len(self.grid):
            raise ValueError(f"cube shape {self.data.shape} does not match {len(self.grid)} bands")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")
        if np.any(self.data < 0):
            raise ValueError("cube contains negative values")


@lru_cache(maxsize=None)
def _table(name: str) -> np.ndarray:
    with resources.files("dazzlesim.data").joinpath(name).open() as fh:
        return np.loadtxt(fh, delimiter=",", skiprows=2)


def _interp_table(name: str, grid: WavelengthGrid, columns) -> np.ndarray:
    tab = _table(name)
    nm = grid.nm
    lo, hi = tab[0, 0], tab[-1, 0]
    if nm.min() < lo - 1e-9 or nm.max() > hi + 1e-9:
        raise ValueError(f"wavelength grid {nm.min():.1f}-{nm.max():.1f} nm outside table "
                         f"support {lo:.0f}-{hi:.0f} nm")
    return np.stack([np.interp(nm, tab[:, 0], tab[:, c]) for c in columns])


def cie_cmf(grid: WavelengthGrid) -> tuple[SpectralCurve, SpectralCurve, SpectralCurve]:
    """CIE 1931 2-degree x-bar, y-bar, z-bar sampled on ``grid`` (380-780 nm)."""
    nm = grid.nm
    if nm.min() < 380 - 1e-9 or nm.max() > 780 + 1e-9:
        raise ValueError("colour matching functions are supported on 380-780 nm only")
    x, y, z = _interp_table("cie1931_2deg_cmf.csv", grid, (1, 2, 3))
    return SpectralCurve(grid, x), SpectralCurve(grid, y), SpectralCurve(grid, z)


def cmf_matrix(grid: WavelengthGrid) -> np.ndarray:
    """(3, bands) array of x-bar, y-bar, z-bar."""
    return np.stack([c.values for c in cie_cmf(grid)])


def daylight_illuminant(grid: WavelengthGrid) -> SpectralCurve:
    """D65 relative power, normalised so that sum(values) * delta_lambda[nm] == 1."""
    (d65,) = _interp_table("cie_d65.csv", grid, (1,))
    d65 = d65 / (d65.sum() * grid.delta_lambda * 1e9)
    return SpectralCurve(grid, d65)


def laser_profile(lambda_l: float, grid: WavelengthGrid, fwhm: float = 10e-9) -> SpectralCurve:
    """Unit-peak Gaussian line centred at ``lambda_l`` with the given FWHM (metres)."""
    lam = grid.array
    if not lam[0] - 1e-15 <= lambda_l <= lam[-1] + 1e-15:
        raise ValueError(f"laser wavelength {lambda_l * 1e9:.2f} nm is outside the grid")
    sigma = fwhm * FWHM_TO_SIGMA
    return SpectralCurve(grid, np.exp(-0.5 * ((lam - lambda_l) / sigma) ** 2))


def xyz_matrix(grid: WavelengthGrid, illuminant: SpectralCurve | None = None) -> np.ndarray:
    """(3, bands) weights giving normalised XYZ (flat unit spectrum has Y = 1).

    This is the CIE weighted sum with ``k = 100 / sum(I * ybar * dlam)``
    followed by the 1/100 rescale.
    """
    cmf = cmf_matrix(grid)
    illum = np.ones(len(grid)) if illuminant is None else illuminant.values
    dlam = grid.delta_lambda * 1e9
    k = 100.0 / np.sum(illum * cmf[1] * dlam)
    return k * illum[None, :] * cmf * dlam / 100.0


def rgb_matrix(grid: WavelengthGrid, illuminant: SpectralCurve | None = None) -> np.ndarray:
    """(3, bands) weights mapping a spectrum to white-balanced linear RGB."""
    xyz = xyz_matrix(grid, illuminant)
    rgb = SRGB_FROM_XYZ @ xyz
    white = rgb.sum(axis=1)
    return rgb / white[:, None]


def project_hsi_to_rgb(cube: SpectralCube, illuminant: SpectralCurve | None = None) -> RgbImage:
    if illuminant is not None and illuminant.grid != cube.grid:
        raise ValueError("illuminant and cube use different wavelength grids")
    return cube.data @ rgb_matrix(cube.grid, illuminant).T


@lru_cache(maxsize=32)
def lift_basis(grid: WavelengthGrid) -> np.ndarray:
    """(bands, K) Gaussian bumps spanning 400-700 nm."""
    centres = np.linspace(400.0, 700.0, LIFT_BASIS_SIZE)
    return np.exp(-0.5 * ((grid.nm[:, None] - centres[None, :]) / LIFT_BASIS_SIGMA_NM) ** 2)


def _min_norm_nonneg(A: np.ndarray, x: np.ndarray, max_iter: int = 100,
                     tol: float = 1e-13) -> np.ndarray:
    """Solve min ||c||^2 s.t. A c = x, c >= 0 for each row of ``x``.

    Semismooth Newton on the dual: c = max(0, A^T y) with A c = x. Vectorised
    over pixels; every pixel carries its own 3x3 Newton system.
    """
    n = x.shape[0]
    scale = np.maximum(np.abs(x).max(axis=1), 1e-300)
    y = np.linalg.solve(A @ A.T, x.T).T
    ridge = 1e-14 * np.trace(A @ A.T)

    def dual(yv, xv):
        c = np.maximum(0.0, yv @ A)
        return 0.5 * np.sum(c * c, axis=1) - np.sum(yv * xv, axis=1), c

    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        g_val, c = dual(y, x)
        resid = c @ A.T - x
        active = np.abs(resid).max(axis=1) > tol * scale
        if not active.any():
            break
        ia = np.flatnonzero(active)
        ya, xa, ra = y[ia], x[ia], resid[ia]
        mask = (ya @ A) > 0
        H = np.einsum("ik,nk,jk->nij", A, mask.astype(float), A) + ridge * np.eye(3)
        step = -np.linalg.solve(H, ra[..., None])[..., 0]
        t = np.ones(len(ia))
        g0 = g_val[ia]
        slope = np.sum(ra * step, axis=1)
        pending = np.ones(len(ia), dtype=bool)
        for _ in range(40):
            trial = ya + t[:, None] * step
            g1, _ = dual(trial, xa)
            ok = g1 <= g0 + 1e-4 * t * slope + 1e-15 * np.abs(g0)
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= 0.5
        y[ia] = ya + t[:, None] * step
    return np.maximum(0.0, y @ A)


def lift_rgb_to_hsi(rgb: RgbImage, grid: WavelengthGrid) -> SpectralCube:
    """Lift linear RGB in [0, 1] to smooth non-negative spectra.

    Each pixel becomes a non-negative combination of Gaussian bumps with the
    smallest coefficient norm whose projection (identity illuminant)
    reproduces the input RGB.
    """
    rgb = np.asarray(rgb, dtype=float)
    shape = rgb.shape
    if shape[-1] != 3:
        raise ValueError("rgb input must have 3 channels in the last axis")
    basis = lift_basis(grid)
    A = rgb_matrix(grid) @ basis  # (3, K)
    coef = _min_norm_nonneg(A, rgb.reshape(-1, 3))
    spec = np.maximum(coef @ basis.T, 0.0)
    lead = {1: (1, 1), 2: (1, shape[0]), 3: shape[:2]}[rgb.ndim]
    return SpectralCube(spec.reshape(*lead, len(grid)), grid)
