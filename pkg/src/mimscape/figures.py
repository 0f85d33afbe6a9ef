"""Matplotlib figures for the reproduction report (PNG files)."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .landscape import LandscapeGrid  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}


def _panel(ax, grid: LandscapeGrid, title: str, levels: int = 20) -> None:
    f = np.asarray(grid.losses, dtype=np.float64)
    finite = np.isfinite(f)
    shown = np.log10(np.where(finite, f, np.nan)) if finite.any() and f[finite].min() > 0 else np.where(finite, f, np.nan)
    a, b = np.meshgrid(grid.alphas, grid.betas, indexing="ij")
    cs = ax.contourf(a, b, shown, levels=levels, cmap="viridis")
    ax.contour(a, b, shown, levels=levels, colors="white", linewidths=0.4)
    ax.plot([0], [0], marker="+", color="red", markersize=6)
    ax.set_title(title)
    ax.set_xlabel(r"$\alpha$")
    ax.set_ylabel(r"$\beta$")
    ax.set_aspect("equal")
    plt.colorbar(cs, ax=ax, shrink=0.8, label="log10 loss")


def landscape_panels(grids: Mapping[str, LandscapeGrid], path, suptitle: str | None = None) -> None:
    """One top-view contour panel per grid, side by side."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(grids), figsize=(3.4 * len(grids), 3.2), squeeze=False)
        for ax, (label, grid) in zip(axes[0], grids.items()):
            _panel(ax, grid, label)
        if suptitle:
            fig.suptitle(suptitle)
        fig.savefig(path)
        plt.close(fig)


def center_slices(grids: Mapping[str, LandscapeGrid], path) -> None:
    """Loss along the alpha axis through the center, relative to the center loss."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        for label, grid in grids.items():
            ci, cj = grid.center
            row = np.asarray(grid.losses[:, cj], dtype=np.float64)
            base = row[ci]
            ax.plot(grid.alphas, np.where(np.isfinite(row), row / base, np.nan), label=label)
        ax.set_yscale("log")
        ax.set_xlabel(r"$\alpha$ ($\beta = 0$)")
        ax.set_ylabel("loss / center loss")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def metric_bars(seeds: Sequence[int], series: Mapping[str, Sequence[float]], ylabel: str, path) -> None:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        width = 0.8 / max(len(series), 1)
        x = np.arange(len(seeds))
        for k, (label, values) in enumerate(series.items()):
            ax.bar(x + k * width - 0.4 + width / 2, values, width, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels([str(s) for s in seeds])
        ax.set_xlabel("seed")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
