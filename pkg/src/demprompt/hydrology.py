"""Depression filling, D8 routing, flow accumulation and stream-network comparison.

Direction codes (row offset, col offset)::

    32  64  128         NW  N  NE
    16   0    1    =    W   .  E
     8   4    2         SW  S  SE

Accumulation counts strictly upstream cells; a cell does not count itself.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from typing import Dict

import numpy as np
from scipy import ndimage

from .raster import RasterGrid

FILL_EPSILON = 1e-4

# (code, drow, dcol) in ascending code order so the first maximum wins ties
D8 = (
    (1, 0, 1),
    (2, 1, 1),
    (4, 1, 0),
    (8, 1, -1),
    (16, 0, -1),
    (32, -1, -1),
    (64, -1, 0),
    (128, -1, 1),
)
CODE_OFFSETS = {code: (dr, dc) for code, dr, dc in D8}


class CycleError(RuntimeError):
    """Flow directions contain a cycle (input was probably not filled)."""


def _raise(value: float, floor: float) -> np.float32:
    """Smallest float32 >= value that is strictly above ``floor``."""
    v = np.float32(value)
    f = np.float32(floor)
    if v <= f:
        v = np.nextafter(f, np.float32(np.inf))
    return v


def fill_depressions(dem: RasterGrid, epsilon: float = FILL_EPSILON) -> RasterGrid:
    """Priority-flood with an epsilon gradient.

    Cells are flooded from the grid edge (and from cells bordering nodata) in
    order of elevation.  A cell reached from a neighbour at equal or greater
    height is raised to that neighbour's height plus ``epsilon`` (at least one
    float32 ulp), so every cell ends up with a strictly descending path out.
    """
    valid = dem.valid_mask
    if not valid.any():
        raise ValueError("cannot fill an all-nodata grid")
    z = dem.values.copy()
    rows, cols = dem.shape
    seen = ~valid
    heap = []
    counter = 0
    for r in range(rows):
        for c in range(cols):
            if not valid[r, c]:
                continue
            edge = r == 0 or c == 0 or r == rows - 1 or c == cols - 1
            if not edge:
                edge = not valid[r - 1 : r + 2, c - 1 : c + 2].all()
            if edge:
                heapq.heappush(heap, (float(z[r, c]), counter, r, c))
                counter += 1
                seen[r, c] = True
    while heap:
        _, _, r, c = heapq.heappop(heap)
        zc = z[r, c]
        for _, dr, dc in D8:
            nr, nc = r + dr, c + dc
            if nr < 0 or nc < 0 or nr >= rows or nc >= cols or seen[nr, nc]:
                continue
            seen[nr, nc] = True
            if z[nr, nc] <= zc:
                z[nr, nc] = _raise(float(zc) + epsilon, zc)
            heapq.heappush(heap, (float(z[nr, nc]), counter, nr, nc))
            counter += 1
    return dem.with_values(z)


def d8_flow_direction(filled: RasterGrid) -> np.ndarray:
    """Steepest-descent code per cell; 0 where no neighbour is lower (or nodata)."""
    z = filled.values.astype(np.float64)
    valid = filled.valid_mask
    rows, cols = z.shape
    best = np.zeros(z.shape)
    codes = np.zeros(z.shape, dtype=np.uint8)
    padded = np.pad(np.where(valid, z, np.inf), 1, constant_values=np.inf)
    for code, dr, dc in D8:
        neighbour = padded[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols]
        dist = math.sqrt(2.0) if dr and dc else 1.0
        drop = (z - neighbour) / dist
        better = valid & (drop > best)
        best = np.where(better, drop, best)
        codes[better] = code
    return codes


def _downstream(directions: np.ndarray):
    rows, cols = directions.shape
    target = np.full(directions.shape, -1, dtype=np.int64)
    for code, (dr, dc) in CODE_OFFSETS.items():
        rr, cc = np.nonzero(directions == code)
        nr, nc = rr + dr, cc + dc
        ok = (nr >= 0) & (nr < rows) & (nc >= 0) & (nc < cols)
        target[rr[ok], cc[ok]] = nr[ok] * cols + nc[ok]
    bad = set(np.unique(directions)) - set(CODE_OFFSETS) - {0}
    if bad:
        raise ValueError(f"invalid direction codes {sorted(bad)}")
    return target.reshape(-1)


def flow_accumulation(directions: np.ndarray) -> np.ndarray:
    """Upstream cell counts via Kahn's topological order."""
    directions = np.asarray(directions)
    down = _downstream(directions)
    n = down.size
    indeg = np.bincount(down[down >= 0], minlength=n)
    acc = np.zeros(n, dtype=np.int64)
    queue = deque(np.nonzero(indeg == 0)[0].tolist())
    done = 0
    while queue:
        i = queue.popleft()
        done += 1
        j = down[i]
        if j >= 0:
            acc[j] += acc[i] + 1
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    if done != n:
        raise CycleError(f"flow directions contain a cycle ({n - done} cells never drained)")
    return acc.reshape(directions.shape)


def extract_streams(accumulation: np.ndarray, threshold: int) -> np.ndarray:
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    return np.asarray(accumulation) >= threshold


def stream_network(dem: RasterGrid, threshold: int) -> np.ndarray:
    """fill -> D8 -> accumulation -> threshold."""
    acc = flow_accumulation(d8_flow_direction(fill_depressions(dem)))
    return extract_streams(acc, threshold)


def buffer_mask(mask: np.ndarray, radius: float, cell_size: float = 1.0) -> np.ndarray:
    """Cells within Euclidean distance ``radius`` (meters) of a true cell."""
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0 or not mask.any():
        return mask.copy()
    dist = ndimage.distance_transform_edt(~mask, sampling=cell_size)
    return dist <= radius + 1e-9 * max(radius, 1.0)


def segmentation_metrics(pred: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    """IoU, precision, recall, F1 and accuracy over all cells.

    An empty union gives IoU 1.  Zero-denominator precision/recall/F1 are 0 and
    listed under ``"undefined"``.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    undefined = []
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return {
        "iou": iou,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": (tp + tn) / (tp + tn + fp + fn),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "undefined": undefined,
    }
