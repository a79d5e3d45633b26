"""Synthetic scenes standing in for RGB / low-res prompt / high-res DEM triplets.

A scene is a fractal bare-earth surface (DTM) plus optional flat-roofed
buildings and smooth canopy bumps (together the DSM).  Building pads are graded:
the DTM is flattened to its mean under each footprint, so roofs are flat and
``dsm - dtm`` is one constant per building.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .evaluation import aspect_from_gradients, gradients
from .raster import RasterGrid, average_downsample, bilinear_resample


class SceneClass(str, enum.Enum):
    URBAN = "Urban"
    VEGETATED = "Vegetated"
    BARE = "Bare"

    @property
    def index(self) -> int:
        return list(SceneClass).index(self)


@dataclass
class TerrainParams:
    seed: int = 0
    size: int = 64
    base_elevation: float = 1000.0
    relief: float = 40.0
    roughness: float = 0.55
    n_buildings: int = 0
    building_height_range: Tuple[float, float] = (4.0, 14.0)
    building_size_range: Tuple[int, int] = (6, 14)
    n_canopy_blobs: int = 0
    canopy_height_range: Tuple[float, float] = (3.0, 10.0)
    canopy_radius_range: Tuple[float, float] = (3.0, 7.0)
    cell_size: float = 1.0

    def validate(self):
        if self.size < 2:
            raise ValueError(f"size must be >= 2, got {self.size}")
        if self.relief < 0:
            raise ValueError(f"relief must be >= 0, got {self.relief}")
        if not 0.0 < self.roughness < 1.0:
            raise ValueError(f"roughness must lie in (0, 1), got {self.roughness}")
        if self.n_buildings < 0 or self.n_canopy_blobs < 0:
            raise ValueError("feature counts must be >= 0")
        for lo, hi in (self.building_height_range, self.canopy_height_range):
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid height range ({lo}, {hi})")


@dataclass(eq=False)
class SceneSample:
    dsm: RasterGrid
    dtm: RasterGrid
    scene_class: SceneClass
    params: TerrainParams
    building_labels: np.ndarray = field(repr=False)  # 0 = none, k = building k
    canopy_mask: np.ndarray = field(repr=False)
    rgb: Optional[List[RasterGrid]] = field(default=None, repr=False)

    @property
    def building_mask(self) -> np.ndarray:
        return self.building_labels > 0

    def __eq__(self, other):
        if not isinstance(other, SceneSample):
            return NotImplemented
        same_rgb = (self.rgb is None and other.rgb is None) or (
            self.rgb is not None and other.rgb is not None
            and all(a == b for a, b in zip(self.rgb, other.rgb))
        )
        return (
            self.dsm == other.dsm and self.dtm == other.dtm
            and self.scene_class == other.scene_class
            and np.array_equal(self.building_labels, other.building_labels)
            and np.array_equal(self.canopy_mask, other.canopy_mask)
            and same_rgb
        )


def classify_features(n_buildings: int, n_canopy: int) -> SceneClass:
    if n_buildings > 0:
        return SceneClass.URBAN
    if n_canopy > 0:
        return SceneClass.VEGETATED
    return SceneClass.BARE


# ------------------------------------------------------------------ generation


def diamond_square(n_levels: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square field of side ``2**n_levels + 1`` with values in [0, 1]."""
    n = 2 ** n_levels + 1
    f = np.zeros((n, n))
    f[0, 0], f[0, -1], f[-1, 0], f[-1, -1] = rng.uniform(-1, 1, 4)
    step = n - 1
    amp = 1.0
    while step > 1:
        half = step // 2
        # diamond: centres of squares
        centres = (f[:-1:step, :-1:step] + f[:-1:step, step::step]
                   + f[step::step, :-1:step] + f[step::step, step::step]) / 4.0
        f[half::step, half::step] = centres + amp * rng.uniform(-1, 1, centres.shape)
        # square: edge midpoints, averaging the available 3 or 4 neighbours
        for r0, c0 in ((0, half), (half, 0)):
            rr, cc = np.meshgrid(np.arange(r0, n, step), np.arange(c0, n, step), indexing="ij")
            total = np.zeros(rr.shape)
            count = np.zeros(rr.shape)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                nr, nc = rr + dr, cc + dc
                ok = (nr >= 0) & (nr < n) & (nc >= 0) & (nc < n)
                total[ok] += f[nr[ok], nc[ok]]
                count[ok] += 1
            f[rr, cc] = total / count + amp * rng.uniform(-1, 1, rr.shape)
        step = half
        amp *= roughness
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def _fractal(size: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    levels = max(1, math.ceil(math.log2(size - 1))) if size > 2 else 1
    field_ = diamond_square(levels, roughness, rng)[:size, :size]
    lo, hi = field_.min(), field_.max()
    return (field_ - lo) / (hi - lo) if hi > lo else np.zeros((size, size))


def _place_buildings(params: TerrainParams, rng, size: int):
    labels = np.zeros((size, size), dtype=np.int32)
    heights = []
    lo, hi = params.building_size_range
    hi = min(hi, size - 2)
    lo = min(lo, hi)
    placed = 0
    attempts = 0
    while placed < params.n_buildings:
        attempts += 1
        if attempts > 2000:
            raise ValueError(f"could not place {params.n_buildings} buildings on a {size} grid")
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        r = int(rng.integers(1, size - h))
        c = int(rng.integers(1, size - w))
        # one-cell gap keeps footprints from touching
        if labels[r - 1 : r + h + 1, c - 1 : c + w + 1].any():
            continue
        placed += 1
        labels[r : r + h, c : c + w] = placed
        heights.append(float(rng.uniform(*params.building_height_range)))
    return labels, heights


def _canopy(params: TerrainParams, rng, size: int, blocked: np.ndarray) -> np.ndarray:
    canopy = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # blobs must stay clear of footprints (and their 1-cell ring)
    if blocked.any():
        from scipy.ndimage import binary_dilation
        blocked = binary_dilation(blocked, iterations=1)
    for _ in range(params.n_canopy_blobs):
        for _attempt in range(200):
            radius = float(rng.uniform(*params.canopy_radius_range))
            cy, cx = rng.uniform(0, size - 1, 2)
            height = float(rng.uniform(*params.canopy_height_range))
            d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (radius * radius)
            bump = np.where(d2 < 1.0, height * (1.0 - d2) ** 2, 0.0)
            if not (bump > 0)[blocked].any():
                canopy = np.maximum(canopy, bump)
                break
    return canopy


def generate_terrain(params: TerrainParams) -> SceneSample:
    params.validate()
    rng = np.random.default_rng(params.seed)
    size = params.size
    base = _fractal(size, params.roughness, rng)
    dtm = params.base_elevation + params.relief * base

    labels, heights = _place_buildings(params, rng, size)
    dsm = dtm.copy()
    for k, h in enumerate(heights, start=1):
        foot = labels == k
        pad = dtm[foot].mean()
        dtm[foot] = pad
        dsm[foot] = pad + h
    canopy = _canopy(params, rng, size, labels > 0)
    dsm = np.where(labels > 0, dsm, dtm + canopy)

    geo = dict(cell_size=params.cell_size, origin_x=0.0, origin_y=size * params.cell_size)
    n_blobs = params.n_canopy_blobs if (canopy > 0).any() else 0
    sample = SceneSample(
        dsm=RasterGrid(dsm.astype(np.float32), **geo),
        dtm=RasterGrid(dtm.astype(np.float32), **geo),
        scene_class=classify_features(len(heights), n_blobs),
        params=params,
        building_labels=labels,
        canopy_mask=canopy > 0,
    )
    sample.rgb = render_pseudo_rgb(sample)
    return sample


def scene_params(scene: SceneClass, seed: int, size: int = 64) -> TerrainParams:
    """Randomised generator settings typical of one landscape class."""
    rng = np.random.default_rng([seed, 1013])
    area = (size / 64.0) ** 2
    common = dict(
        seed=seed,
        size=size,
        base_elevation=float(rng.uniform(200.0, 2500.0)),
        roughness=float(rng.uniform(0.45, 0.65)),
    )
    if scene == SceneClass.URBAN:
        return TerrainParams(relief=float(rng.uniform(5.0, 25.0)),
                             n_buildings=max(1, int(round(rng.integers(3, 7) * area))),
                             n_canopy_blobs=int(round(rng.integers(0, 4) * area)), **common)
    if scene == SceneClass.VEGETATED:
        return TerrainParams(relief=float(rng.uniform(30.0, 80.0)),
                             n_canopy_blobs=max(1, int(round(rng.integers(6, 14) * area))), **common)
    return TerrainParams(relief=float(rng.uniform(20.0, 60.0)), **common)


def generate_scene(scene: SceneClass, seed: int, size: int = 64) -> SceneSample:
    return generate_terrain(scene_params(SceneClass(scene), seed, size))


# ------------------------------------------------------------------ rendering & prompts


def hillshade(dem: RasterGrid, azimuth_deg: float = 315.0, altitude_deg: float = 45.0) -> RasterGrid:
    gx, gy = gradients(dem)
    slope = np.arctan(np.hypot(gx, gy))
    aspect = np.radians(np.nan_to_num(aspect_from_gradients(gx, gy), nan=0.0))
    zenith = math.radians(90.0 - altitude_deg)
    az = math.radians(azimuth_deg)
    shade = math.cos(zenith) * np.cos(slope) + math.sin(zenith) * np.sin(slope) * np.cos(az - aspect)
    return dem.with_values(np.clip(shade, 0.0, 1.0).astype(np.float32))


def render_pseudo_rgb(sample: SceneSample) -> List[RasterGrid]:
    """Three [0, 1] channels: hillshade, normalised slope, land-cover texture."""
    dsm = sample.dsm
    shade = hillshade(dsm, 315.0, 45.0).values
    gx, gy = gradients(dsm)
    slope = np.degrees(np.arctan(np.hypot(gx, gy))) / 90.0
    rng = np.random.default_rng([sample.params.seed, 2029])
    texture = np.full(dsm.shape, 0.25)
    speckle = rng.uniform(0.0, 1.0, dsm.shape)
    texture = np.where(sample.canopy_mask, 0.35 + 0.4 * speckle, texture)
    texture = np.where(sample.building_mask, 0.9, texture)
    return [dsm.with_values(np.clip(ch, 0.0, 1.0).astype(np.float32)) for ch in (shade, slope, texture)]


def degrade_to_prompt(
    dsm: RasterGrid,
    factor: int,
    bias_sigma: float = 0.0,
    canopy_bias: float = 0.0,
    canopy_mask: Optional[np.ndarray] = None,
    seed: int = 0,
) -> RasterGrid:
    """Block-average by ``factor`` then add N(0, bias_sigma) noise and
    ``canopy_bias`` times each block's canopy cover fraction."""
    low = average_downsample(dsm, factor)
    values = low.values.astype(np.float64)
    if bias_sigma > 0:
        values = values + np.random.default_rng([seed, 3571]).normal(0.0, bias_sigma, values.shape)
    if canopy_bias and canopy_mask is not None:
        cover = np.asarray(canopy_mask, dtype=np.float64).reshape(
            low.rows, factor, low.cols, factor).mean(axis=(1, 3))
        values = values + canopy_bias * cover
    return low.with_values(values.astype(np.float32))


def hole_mask(shape: Tuple[int, int], hole_fraction: float = 0.5) -> np.ndarray:
    if not 0.0 < hole_fraction < 1.0:
        raise ValueError(f"hole_fraction must lie in (0, 1), got {hole_fraction}")
    rows, cols = shape
    side = int(round(hole_fraction * min(rows, cols)))
    r0 = (rows - side) // 2
    c0 = (cols - side) // 2
    mask = np.zeros(shape, dtype=bool)
    mask[r0 : r0 + side, c0 : c0 + side] = True
    return mask


def carve_void(hr: RasterGrid, lr_prompt: RasterGrid, hole_fraction: float = 0.5) -> RasterGrid:
    """Replace a centred square of ``hr`` with the bilinear upsampled prompt."""
    mask = hole_mask(hr.shape, hole_fraction)
    filler = bilinear_resample(lr_prompt, hr.rows, hr.cols).values
    return hr.with_values(np.where(mask, filler, hr.values))


def terrain_only_prompt(sample: SceneSample) -> RasterGrid:
    return sample.dtm


def sample_manifest(sample: SceneSample) -> dict:
    return {
        "scene_class": sample.scene_class.value,
        "params": asdict(sample.params),
        "n_buildings": int(sample.building_labels.max()),
        "canopy_cells": int(sample.canopy_mask.sum()),
    }
