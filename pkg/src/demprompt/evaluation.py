"""Elevation, slope and aspect error metrics, distribution statistics and reports.

Derivative convention (shared with hillshading): x points east (+column),
y points north (-row).  Partials are central differences over ``2 * cell``
in the interior and one-sided at the edges.  Slope is
``atan(|grad z|)`` in degrees; aspect is the compass bearing (clockwise from
north, [0, 360)) of steepest descent, nodata where both partials are exactly 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .raster import RasterGrid

ASPECT_NODATA = -9999.0


class EmptyRegionError(ValueError):
    pass


def gradients(dem: RasterGrid):
    """Return (dz/dx, dz/dy) as float64 arrays; x east, y north."""
    z = dem.values.astype(np.float64)
    if dem.rows < 2 or dem.cols < 2:
        raise ValueError(f"need at least 2x2 cells for derivatives, got {dem.shape}")
    dzdx = np.gradient(z, dem.cell_size, axis=1)
    dzdy = -np.gradient(z, dem.cell_size, axis=0)
    return dzdx, dzdy


def _derivative_mask(dem: RasterGrid) -> np.ndarray:
    """Cells whose derivative stencil touches no nodata."""
    valid = dem.valid_mask
    if valid.all():
        return valid
    padded = np.pad(valid, 1, mode="edge")
    ok = valid.copy()
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ok &= padded[1 + dr : 1 + dr + dem.rows, 1 + dc : 1 + dc + dem.cols]
    return ok


def slope_map(dem: RasterGrid) -> RasterGrid:
    gx, gy = gradients(dem)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))
    slope = np.where(_derivative_mask(dem), slope, dem.nodata)
    return dem.with_values(slope.astype(np.float32))


def aspect_from_gradients(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Compass bearing of -grad, NaN on exact flats."""
    aspect = np.degrees(np.arctan2(-gx, -gy)) % 360.0
    aspect = np.where(aspect >= 360.0, 0.0, aspect)
    return np.where((gx == 0) & (gy == 0), np.nan, aspect)


def aspect_map(dem: RasterGrid) -> RasterGrid:
    gx, gy = gradients(dem)
    aspect = aspect_from_gradients(gx, gy)
    ok = _derivative_mask(dem) & ~np.isnan(aspect)
    return RasterGrid(
        np.where(ok, aspect, ASPECT_NODATA).astype(np.float32),
        dem.cell_size, dem.origin_x, dem.origin_y, ASPECT_NODATA,
    )


# ------------------------------------------------------------------ error metrics


def _paired(truth: RasterGrid, pred: RasterGrid, region: Optional[np.ndarray]):
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs prediction {pred.shape}")
    mask = truth.valid_mask & pred.valid_mask
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != truth.shape:
            raise ValueError(f"region mask {region.shape} does not match grid {truth.shape}")
        mask &= region
    if not mask.any():
        raise EmptyRegionError("no valid cells in the evaluation region")
    return truth.values[mask].astype(np.float64), pred.values[mask].astype(np.float64)


def mae(truth: RasterGrid, pred: RasterGrid, region: Optional[np.ndarray] = None) -> float:
    y, yhat = _paired(truth, pred, region)
    return float(np.mean(np.abs(y - yhat)))


def rmse(truth: RasterGrid, pred: RasterGrid, region: Optional[np.ndarray] = None) -> float:
    y, yhat = _paired(truth, pred, region)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def aspect_error(
    truth_aspect: RasterGrid,
    pred_aspect: RasterGrid,
    region: Optional[np.ndarray] = None,
    circular: bool = True,
) -> Dict[str, float]:
    """MAE/RMSE of aspect differences in degrees.

    With ``circular=True`` the per-cell difference is ``min(|a-b|, 360-|a-b|)``;
    the linear mode keeps ``|a-b|`` for sensitivity comparisons.
    """
    a, b = _paired(truth_aspect, pred_aspect, region)
    d = np.abs(a - b)
    if circular:
        d = np.minimum(d, 360.0 - d)
    return {"mae": float(d.mean()), "rmse": float(np.sqrt(np.mean(d * d)))}


# ------------------------------------------------------------------ distributions


@dataclass
class DistributionStats:
    mean: float
    std: float
    skewness: Optional[float]
    kurtosis: Optional[float]
    bimodality: Optional[float]
    n: int
    degenerate: bool = False


def distribution_stats(dem: RasterGrid) -> DistributionStats:
    """Moments of the valid cells.

    ``std`` is the sample (n-1) standard deviation.  Skewness ``m3/m2**1.5`` and
    Pearson kurtosis ``m4/m2**2`` use population central moments, and the
    bimodality coefficient is Sarle's ``(g1**2 + 1)/g2``.
    """
    x = dem.values[dem.valid_mask].astype(np.float64)
    if x.size < 4:
        raise ValueError(f"need at least 4 valid cells, got {x.size}")
    mu = x.mean()
    d = x - mu
    m2 = np.mean(d ** 2)
    std = float(np.sqrt(np.sum(d ** 2) / (x.size - 1)))
    if m2 <= 0.0:
        return DistributionStats(float(mu), 0.0, None, None, None, int(x.size), degenerate=True)
    g1 = float(np.mean(d ** 3) / m2 ** 1.5)
    g2 = float(np.mean(d ** 4) / m2 ** 2)
    return DistributionStats(float(mu), std, g1, g2, (g1 * g1 + 1.0) / g2, int(x.size))


# ------------------------------------------------------------------ reports


@dataclass
class StreamConfig:
    threshold: Optional[int] = None
    threshold_fraction: float = 0.005
    radii_cells: Sequence[float] = (1, 2, 5)

    def threshold_for(self, n_cells: int) -> int:
        if self.threshold is not None:
            return int(self.threshold)
        return max(1, int(math.ceil(self.threshold_fraction * n_cells)))


@dataclass
class EvalReport:
    """Candidate and baseline errors against truth, one row per quantity."""

    errors: Dict[str, Dict[str, Dict[str, float]]]
    region: Optional[str] = None
    region_cells: int = 0
    distribution: Dict[str, dict] = field(default_factory=dict)
    streams: List[dict] = field(default_factory=list)
    schema_version: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def improved(self) -> bool:
        e = self.errors["elevation"]
        return e["candidate"]["rmse"] < e["baseline"]["rmse"]

    def table(self) -> str:
        lines = [f"{'':14s}{'':6s}{'Candidate':>12s}{'Baseline':>12s}"]
        for qty, unit in (("elevation", "m"), ("slope", "deg"), ("aspect", "deg")):
            for stat in ("mae", "rmse"):
                label = f"{qty.capitalize()} ({unit})" if stat == "mae" else ""
                c = self.errors[qty]["candidate"][stat]
                b = self.errors[qty]["baseline"][stat]
                lines.append(f"{label:14s}{stat.upper():6s}{c:12.3f}{b:12.3f}")
        for block in self.streams:
            lines.append(
                f"streams r={block['radius_cells']:g} cells: IoU {block['candidate']['iou']:.4f}"
                f" vs {block['baseline']['iou']:.4f}"
            )
        return "\n".join(lines)


def _quantity_errors(truth, cand, base, region, circular=True):
    out = {}
    out["elevation"] = {
        name: {"mae": mae(truth, g, region), "rmse": rmse(truth, g, region)}
        for name, g in (("candidate", cand), ("baseline", base))
    }
    ts = slope_map(truth)
    out["slope"] = {
        name: {"mae": mae(ts, slope_map(g), region), "rmse": rmse(ts, slope_map(g), region)}
        for name, g in (("candidate", cand), ("baseline", base))
    }
    ta = aspect_map(truth)
    out["aspect"] = {}
    for name, g in (("candidate", cand), ("baseline", base)):
        try:
            out["aspect"][name] = aspect_error(ta, aspect_map(g), region, circular)
        except EmptyRegionError:
            out["aspect"][name] = {"mae": 0.0, "rmse": 0.0}
    return out


def compare_report(
    truth: RasterGrid,
    candidate: RasterGrid,
    baseline: RasterGrid,
    region: Optional[np.ndarray] = None,
    stream_config: Optional[StreamConfig] = None,
    region_name: Optional[str] = None,
    circular_aspect: bool = True,
) -> EvalReport:
    """All metrics for candidate-vs-truth and baseline-vs-truth.

    ``region`` restricts elevation/slope/aspect errors (e.g. a void mask); stream
    metrics always use the whole grid.
    """
    for g in (candidate, baseline):
        if g.shape != truth.shape:
            raise ValueError(f"grid {g.shape} not aligned with truth {truth.shape}")
    errors = _quantity_errors(truth, candidate, baseline, region, circular_aspect)
    dist = {}
    for name, g in (("truth", truth), ("candidate", candidate), ("baseline", baseline)):
        try:
            dist[name] = asdict(distribution_stats(g))
        except ValueError:
            pass
    streams = []
    if stream_config is not None:
        from . import hydrology

        threshold = stream_config.threshold_for(truth.rows * truth.cols)
        masks = {name: hydrology.stream_network(g, threshold) for name, g in
                 (("truth", truth), ("candidate", candidate), ("baseline", baseline))}
        for radius in stream_config.radii_cells:
            radius_m = float(radius) * truth.cell_size
            tb = hydrology.buffer_mask(masks["truth"], radius_m, truth.cell_size)
            block = {"radius_cells": float(radius), "radius_m": radius_m, "threshold": threshold}
            for name in ("candidate", "baseline"):
                pb = hydrology.buffer_mask(masks[name], radius_m, truth.cell_size)
                block[name] = hydrology.segmentation_metrics(pb, tb)
            streams.append(block)
    n_region = int(np.count_nonzero(region)) if region is not None else truth.rows * truth.cols
    return EvalReport(errors, region_name if region is not None else None, n_region, dist, streams)
