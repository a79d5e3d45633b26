"""Seamless mosaicking of overlapping patch predictions by distance-weighted blending."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .raster import RasterGrid

MASK_FLOOR = 1e-3


def blend_mask(h: int, w: int, floor: float = MASK_FLOOR) -> np.ndarray:
    """Linear weight mask: 1 at the centre falling to ``floor`` on the border.

    raw(i, j) = min(i, j, h-1-i, w-1-j) / M with M = floor((min(h, w) - 1) / 2)
    (M = 1 when that is 0).  The floor keeps single-coverage border cells usable.
    """
    if h < 1 or w < 1:
        raise ValueError(f"mask dims must be >= 1, got {h}x{w}")
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    dist = np.minimum(np.minimum(i, h - 1 - i), np.minimum(j, w - 1 - j)).astype(np.float64)
    m = (min(h, w) - 1) // 2 or 1
    return np.maximum(dist / m, floor)


@dataclass
class BlendAccumulator:
    """Weighted sums of patch contributions over the mosaic grid.

    Contributions are kept until the sums are read and are then reduced in
    placement order, so the result does not depend on insertion order down to
    the last bit.  Sums are 64-bit.
    """

    rows: int
    cols: int
    cell_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: float = -9999.0
    _pending: list = field(default_factory=list, init=False, repr=False)
    _sums: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, init=False, repr=False)

    @classmethod
    def like(cls, grid: RasterGrid) -> "BlendAccumulator":
        return cls(grid.rows, grid.cols, grid.cell_size, grid.origin_x, grid.origin_y, grid.nodata)

    def add(self, placement: Tuple[int, int], weight: np.ndarray, values: np.ndarray) -> None:
        self._pending.append((tuple(placement), weight, values))
        self._sums = None

    def _reduce(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._sums is None:
            vs = np.zeros((self.rows, self.cols), dtype=np.float64)
            ws = np.zeros((self.rows, self.cols), dtype=np.float64)
            key = lambda e: (e[0], e[2].tobytes(), e[1].tobytes())
            for (r, c), w, v in sorted(self._pending, key=key):
                h, wd = v.shape
                vs[r : r + h, c : c + wd] += w * v
                ws[r : r + h, c : c + wd] += w
            self._sums = (vs, ws)
        return self._sums

    @property
    def value_sum(self) -> np.ndarray:
        return self._reduce()[0]

    @property
    def weight_sum(self) -> np.ndarray:
        return self._reduce()[1]

    def zero_weight_count(self) -> int:
        return int(np.count_nonzero(self.weight_sum <= 0))


def accumulate_patch(acc: BlendAccumulator, patch: RasterGrid, placement: Tuple[int, int],
                     mask: Optional[np.ndarray] = None) -> None:
    r, c = placement
    h, w = patch.shape
    if r < 0 or c < 0 or r + h > acc.rows or c + w > acc.cols:
        raise IndexError(f"patch {h}x{w} at {placement} outside mosaic {acc.rows}x{acc.cols}")
    weight = blend_mask(h, w) if mask is None else np.asarray(mask, dtype=np.float64)
    valid = patch.valid_mask
    weight = np.where(valid, weight, 0.0)
    acc.add((r, c), weight, np.where(valid, patch.values.astype(np.float64), 0.0))


def finalize(acc: BlendAccumulator) -> RasterGrid:
    value_sum, weight_sum = acc.value_sum, acc.weight_sum
    covered = weight_sum > 0
    out = np.full((acc.rows, acc.cols), acc.nodata, dtype=np.float64)
    out[covered] = value_sum[covered] / weight_sum[covered]
    return RasterGrid(out.astype(np.float32), acc.cell_size, acc.origin_x, acc.origin_y, acc.nodata)


def coverage_report(acc: BlendAccumulator) -> dict:
    zero = acc.zero_weight_count()
    return {
        "rows": acc.rows,
        "cols": acc.cols,
        "zero_weight_pixels": zero,
        "covered_fraction": 1.0 - zero / float(acc.rows * acc.cols),
        "min_weight": float(acc.weight_sum.min()),
    }


def mosaic_patches(patches, placements, like: RasterGrid) -> RasterGrid:
    acc = BlendAccumulator.like(like)
    for patch, placement in zip(patches, placements):
        accumulate_patch(acc, patch, placement)
    return finalize(acc)


def second_difference_ratio(field: np.ndarray, boundaries_rows, boundaries_cols) -> float:
    """RMS of second differences straddling tile boundary lines over the RMS of
    all other interior second differences (both axes pooled)."""
    f = np.asarray(field, dtype=np.float64)
    dxx = f[:, :-2] - 2 * f[:, 1:-1] + f[:, 2:]   # centred on columns 1..n-2
    dyy = f[:-2, :] - 2 * f[1:-1, :] + f[2:, :]
    col_centres = np.arange(1, f.shape[1] - 1)
    row_centres = np.arange(1, f.shape[0] - 1)

    def near(centres, lines):
        sel = np.zeros(centres.size, dtype=bool)
        for b in lines:
            sel |= np.abs(centres - b) <= 1
        return sel

    bc = near(col_centres, boundaries_cols)
    br = near(row_centres, boundaries_rows)
    boundary = np.concatenate([dxx[:, bc].ravel(), dyy[br, :].ravel()])
    interior = np.concatenate([dxx[:, ~bc].ravel(), dyy[~br, :].ravel()])
    rms = lambda a: float(np.sqrt(np.mean(a * a))) if a.size else 0.0
    ref = rms(interior)
    return rms(boundary) / ref if ref > 0 else float("inf")
