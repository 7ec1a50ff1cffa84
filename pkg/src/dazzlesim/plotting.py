"""Figures written to files (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .optics import HeightMap, PsfStack  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 6.0

params = {
    "axes.labelsize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 150,
    "lines.linewidth": 1.0,
    "image.origin": "lower",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def psf_montage(stack: PsfStack, path, decades: float = 6.0) -> Path:
    """Per-band PSFs on a shared log10 scale spanning ``decades`` below the peak."""
    with plt.rc_context(params):
        n = len(stack.grid)
        cols = min(n, 6)
        rows = int(np.ceil(n / cols))
        fig, axes = plt.subplots(rows, cols, figsize=(fig_width, fig_width * rows / cols + 0.4),
                                 squeeze=False)
        top = np.log10(stack.psf.max())
        extent_um = np.array([-0.5, 0.5]) * stack.psf.shape[-1] * stack.pitch * 1e6
        for ax in axes.ravel():
            ax.axis("off")
        for i, lam in enumerate(stack.grid.nm):
            ax = axes.ravel()[i]
            img = np.log10(np.maximum(stack.psf[i], 10 ** (top - decades)))
            im = ax.imshow(img, vmin=top - decades, vmax=top, cmap="magma",
                           extent=[*extent_um, *extent_um])
            ax.set_title(f"{lam:.0f} nm")
        fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8, label="log10 PSF")
        return _save(fig, path)


def mask_image(h: HeightMap, path) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width * 0.6, fig_width * 0.5))
        half = 0.5 * h.shape[1] * h.pitch * 1e3
        im = ax.imshow(h.heights * 1e6, cmap="viridis", vmin=0, vmax=h.h_max * 1e6,
                       extent=[-half, half, -half, half])
        ax.set_xlabel("u (mm)")
        ax.set_ylabel("v (mm)")
        fig.colorbar(im, ax=ax, label="height (um)")
        return _save(fig, path)


def lsr_plot(wavelengths_nm, curves: dict[str, list[float]], path) -> Path:
    """LSR per wavelength for several masks on a log axis."""
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width, fig_width * golden_mean))
        for name, values in curves.items():
            ax.semilogy(wavelengths_nm, values, marker="o", ms=3, label=name)
        ax.set_xlabel("wavelength (nm)")
        ax.set_ylabel("LSR")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        return _save(fig, path)


def history_plot(history: list[dict], path) -> Path:
    with plt.rc_context(params):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(fig_width, fig_width * golden_mean * 0.6))
        it = [r["iter"] for r in history]
        a1.semilogy(it, [r["l_doe"] for r in history], label="l_doe")
        a1.semilogy(it, [r["best_l_doe"] for r in history], "--", label="best")
        a1.set_xlabel("iteration")
        a1.legend()
        a2.semilogy(it, [r["mean_lsr"] for r in history], label="mean LSR")
        a2.plot(it, [r["mean_bsr"] for r in history], label="mean BSR")
        a2.set_xlabel("iteration")
        a2.legend()
        return _save(fig, path)


def image_row(images: dict[str, np.ndarray], path) -> Path:
    """Side-by-side RGB panels (values clipped to [0, 1], gamma 1/2.2 for display)."""
    with plt.rc_context(params):
        n = len(images)
        fig, axes = plt.subplots(1, n, figsize=(fig_width, fig_width / n + 0.3), squeeze=False)
        for ax, (name, img) in zip(axes[0], images.items()):
            ax.imshow(np.clip(img, 0, 1) ** (1 / 2.2), origin="upper")
            ax.set_title(name)
            ax.axis("off")
        return _save(fig, path)
