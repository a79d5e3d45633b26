"""Matplotlib figures for the report path.  Everything renders off-screen to files."""

from __future__ import annotations

import os
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import aspect_map, slope_map  # noqa: E402
from .raster import RasterGrid  # noqa: E402
from .terrain import hillshade  # noqa: E402


def _masked(grid: RasterGrid, values: Optional[np.ndarray] = None) -> np.ma.MaskedArray:
    v = grid.values if values is None else values
    return np.ma.masked_where(~grid.valid_mask | ~np.isfinite(v) | (v == grid.nodata), v)


def _extent(grid: RasterGrid):
    return (grid.origin_x, grid.origin_x + grid.cols * grid.cell_size,
            grid.origin_y - grid.rows * grid.cell_size, grid.origin_y)


def dem_panels(grids: Dict[str, RasterGrid], path: str, title: str = "") -> str:
    """One row per DEM: elevation over hillshade, slope and aspect."""
    names = list(grids)
    fig, axes = plt.subplots(len(names), 3, figsize=(10, 3.2 * len(names)), squeeze=False)
    vmin = min(float(np.min(_masked(g))) for g in grids.values())
    vmax = max(float(np.max(_masked(g))) for g in grids.values())
    for row, name in enumerate(names):
        g = grids[name]
        ext = _extent(g)
        ax = axes[row, 0]
        ax.imshow(_masked(g, hillshade(g).values), cmap="gray", extent=ext)
        im = ax.imshow(_masked(g), cmap="terrain", vmin=vmin, vmax=vmax, alpha=0.6, extent=ext)
        fig.colorbar(im, ax=ax, label="m")
        ax.set_title(f"{name}: elevation")
        im = axes[row, 1].imshow(_masked(g, slope_map(g).values), cmap="magma", vmin=0, extent=ext)
        fig.colorbar(im, ax=axes[row, 1], label="deg")
        axes[row, 1].set_title("slope")
        asp = aspect_map(g)
        im = axes[row, 2].imshow(_masked(asp), cmap="twilight", vmin=0, vmax=360, extent=ext)
        fig.colorbar(im, ax=axes[row, 2], label="deg")
        axes[row, 2].set_title("aspect")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def error_map(truth: RasterGrid, candidate: RasterGrid, baseline: RasterGrid, path: str) -> str:
    """Signed elevation error of candidate and baseline on a shared scale."""
    e_c = candidate.values.astype(np.float64) - truth.values
    e_b = baseline.values.astype(np.float64) - truth.values
    lim = float(np.nanpercentile(np.abs(np.concatenate([e_c.ravel(), e_b.ravel()])), 99)) or 1.0
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, err, name in zip(axes, (e_c, e_b), ("candidate", "baseline")):
        im = ax.imshow(_masked(truth, err), cmap="RdBu_r", vmin=-lim, vmax=lim, extent=_extent(truth))
        ax.set_title(f"{name} - truth")
    fig.colorbar(im, ax=list(axes), label="m")
    return _save(fig, path)


def stream_overlay(dem: RasterGrid, truth: np.ndarray, pred: np.ndarray, path: str) -> str:
    """Hillshade with true streams in blue and predicted streams in red."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(hillshade(dem).values, cmap="gray", extent=_extent(dem))
    rgba = np.zeros(truth.shape + (4,))
    rgba[truth] = (0.1, 0.3, 1.0, 0.8)
    rgba[pred & ~truth] = (1.0, 0.1, 0.1, 0.8)
    rgba[pred & truth] = (0.6, 0.0, 0.8, 0.9)
    ax.imshow(rgba, extent=_extent(dem))
    ax.set_title("streams: truth blue, prediction red, both purple")
    return _save(fig, path)


def loss_curves(history: Sequence[dict], path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ep = [h["epoch"] for h in history]
    for key in ("train_loss", "val_loss"):
        ys = [h.get(key, float("nan")) for h in history]
        if np.isfinite(ys).any():
            ax.plot(ep, ys, marker="o", label=key.replace("_", " "))
    ax.set_xlabel("epoch")
    ax.set_ylabel("edge-aware loss")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def metric_bars(errors: Dict[str, dict], path: str) -> str:
    """Candidate vs baseline bars for each quantity/statistic of an EvalReport."""
    labels, cand, base = [], [], []
    for qty in ("elevation", "slope", "aspect"):
        for stat in ("mae", "rmse"):
            labels.append(f"{qty} {stat.upper()}")
            cand.append(errors[qty]["candidate"][stat])
            base.append(errors[qty]["baseline"][stat])
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(x - 0.2, base, 0.4, label="baseline")
    ax.bar(x + 0.2, cand, 0.4, label="candidate")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
