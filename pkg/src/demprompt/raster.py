"""Geo-referenced raster grids, the ``.r32g`` binary format, resampling and tiling.

Georeference convention: ``origin_x``/``origin_y`` is the upper-left corner of
the grid, rows run north to south and columns west to east.  Pixel ``(r, c)``
therefore has its upper-left corner at ``(origin_x + c * cell, origin_y - r * cell)``.

The ``.r32g`` layout (all little-endian)::

    "R32G"  u32 rows  u32 cols  f64 cell_size  f64 origin_x  f64 origin_y
    f32 nodata  f32[rows * cols] values (row-major)

It maps onto standard geo-raster metadata as: width=cols, height=rows,
transform=(cell, 0, origin_x, 0, -cell, origin_y), nodata=nodata.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

MAGIC = b"R32G"
_HEADER = struct.Struct("<4sIIdddf")
DEFAULT_NODATA = -9999.0


class RasterError(Exception):
    """Base class for raster errors."""


class RasterFormatError(RasterError):
    """A .r32g file could not be decoded."""


class BadMagicError(RasterFormatError):
    pass


class TruncatedRasterError(RasterFormatError):
    pass


class InvalidHeaderError(RasterFormatError):
    pass


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """A 2-D float32 raster with a north-up georeference and a nodata sentinel."""

    values: np.ndarray
    cell_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"raster values must be a non-empty 2-D array, got shape {values.shape}")
        if not (math.isfinite(self.cell_size) and self.cell_size > 0):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        nodata = float(np.float32(self.nodata))
        valid = values != np.float32(nodata) if not math.isnan(nodata) else ~np.isnan(values)
        if not np.all(np.isfinite(values[valid])):
            raise ValueError("raster contains non-finite values outside nodata")
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "nodata", nodata)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def valid_mask(self) -> np.ndarray:
        if math.isnan(self.nodata):
            return ~np.isnan(self.values)
        return self.values != np.float32(self.nodata)

    def with_values(self, values: np.ndarray) -> "RasterGrid":
        """Same georeference, new values."""
        return RasterGrid(values, self.cell_size, self.origin_x, self.origin_y, self.nodata)

    def masked(self) -> np.ma.MaskedArray:
        return np.ma.MaskedArray(self.values, mask=~self.valid_mask)

    def same_georeference(self, other: "RasterGrid") -> bool:
        return (
            self.shape == other.shape
            and self.cell_size == other.cell_size
            and self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
        )

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.same_georeference(other)
            and np.float32(self.nodata).tobytes() == np.float32(other.nodata).tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


# --------------------------------------------------------------------------- I/O


def write_raster(grid: RasterGrid, path) -> None:
    path = Path(path)
    header = _HEADER.pack(
        MAGIC, grid.rows, grid.cols, float(grid.cell_size), float(grid.origin_x),
        float(grid.origin_y), grid.nodata,
    )
    payload = grid.values.astype("<f4", copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write raster {path}: {exc}") from exc


def read_raster(path) -> RasterGrid:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedRasterError(f"{path}: header truncated ({len(blob)} bytes)")
    _, rows, cols, cell, ox, oy, nodata = _HEADER.unpack_from(blob)
    if rows < 1 or cols < 1 or not all(map(math.isfinite, (cell, ox, oy))) or cell <= 0:
        raise InvalidHeaderError(
            f"{path}: invalid header rows={rows} cols={cols} cell={cell} origin=({ox}, {oy})"
        )
    expected = _HEADER.size + 4 * rows * cols
    if len(blob) < expected:
        raise TruncatedRasterError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    return RasterGrid(values.reshape(rows, cols).astype(np.float32), cell, ox, oy, nodata)


def export_png(grid: RasterGrid, path) -> None:
    """8-bit grayscale, min-max stretched over valid cells; nodata is black."""
    from PIL import Image

    valid = grid.valid_mask
    out = np.zeros(grid.shape, dtype=np.uint8)
    if valid.any():
        v = grid.values.astype(np.float64)
        lo, hi = v[valid].min(), v[valid].max()
        span = hi - lo if hi > lo else 1.0
        out[valid] = np.round((v[valid] - lo) / span * 255.0).astype(np.uint8)
    Image.fromarray(out, mode="L").save(Path(path))


# -------------------------------------------------------------------- resampling


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights (n_out x n_in) mapping first/last pixel centres
    onto first/last pixel centres.  Exact on affine signals."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resample(grid: RasterGrid, out_rows: int, out_cols: int) -> RasterGrid:
    """Resample to ``out_rows x out_cols`` over the same extent.

    Any output pixel with a nonzero weight on a nodata input pixel becomes nodata.
    """
    if out_rows < 1 or out_cols < 1:
        raise ValueError(f"output dims must be >= 1, got {out_rows}x{out_cols}")
    ry = interp_matrix(grid.rows, out_rows)
    rx = interp_matrix(grid.cols, out_cols)
    valid = grid.valid_mask
    v = np.where(valid, grid.values, 0.0).astype(np.float64)
    out = ry @ v @ rx.T
    touched_invalid = (np.abs(ry) > 0).astype(np.float64) @ (~valid).astype(np.float64) @ (np.abs(rx) > 0).T
    out = np.where(touched_invalid > 0, grid.nodata, out)
    # extent-preserving cell size; rows and cols scale equally only for square resampling
    cell = grid.cell_size * grid.rows / out_rows
    return RasterGrid(out.astype(np.float32), cell, grid.origin_x, grid.origin_y, grid.nodata)


def average_downsample(grid: RasterGrid, factor: int) -> RasterGrid:
    if factor < 1 or grid.rows % factor or grid.cols % factor:
        raise ValueError(f"grid {grid.rows}x{grid.cols} is not divisible by factor {factor}")
    blocks = grid.values.astype(np.float64).reshape(
        grid.rows // factor, factor, grid.cols // factor, factor
    )
    valid = grid.valid_mask.reshape(blocks.shape)
    out = blocks.mean(axis=(1, 3))
    out = np.where(valid.all(axis=(1, 3)), out, grid.nodata)
    return RasterGrid(out.astype(np.float32), grid.cell_size * factor, grid.origin_x, grid.origin_y, grid.nodata)


# ------------------------------------------------------------------------ tiling


@dataclass(frozen=True)
class TilePlan:
    tile_size: int
    overlap: int
    rows: int
    cols: int
    placements: List[Tuple[int, int]] = field(default_factory=list)


def _axis_offsets(n: int, tile: int, overlap: int) -> List[int]:
    stride = tile - overlap
    offsets = list(range(0, n - tile + 1, stride))
    if offsets[-1] + tile < n:
        offsets.append(n - tile)
    return offsets


def make_tile_plan(grid: RasterGrid, tile_size: int, overlap: int) -> TilePlan:
    """Row-major placements stepping by ``tile_size - overlap``; the last tile on
    each axis is clamped inward so every tile holds only real data."""
    if tile_size < 1 or tile_size > min(grid.rows, grid.cols):
        raise ValueError(f"tile size {tile_size} does not fit in grid {grid.rows}x{grid.cols}")
    if not 0 <= overlap < tile_size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < tile_size, got {overlap}")
    rs = _axis_offsets(grid.rows, tile_size, overlap)
    cs = _axis_offsets(grid.cols, tile_size, overlap)
    return TilePlan(tile_size, overlap, grid.rows, grid.cols, [(r, c) for r in rs for c in cs])


def extract_tile(grid: RasterGrid, placement: Tuple[int, int], tile_size: int) -> RasterGrid:
    r, c = placement
    if r < 0 or c < 0 or r + tile_size > grid.rows or c + tile_size > grid.cols:
        raise IndexError(
            f"tile {tile_size} at {placement} exceeds grid {grid.rows}x{grid.cols}"
        )
    return RasterGrid(
        grid.values[r : r + tile_size, c : c + tile_size].copy(),
        grid.cell_size,
        grid.origin_x + c * grid.cell_size,
        grid.origin_y - r * grid.cell_size,
        grid.nodata,
    )
