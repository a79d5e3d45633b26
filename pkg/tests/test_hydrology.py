import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from demprompt.hydrology import (
    FILL_EPSILON,
    CycleError,
    buffer_mask,
    d8_flow_direction,
    extract_streams,
    fill_depressions,
    flow_accumulation,
    segmentation_metrics,
)
from demprompt.raster import RasterGrid

from oracles import accumulation_by_paths, confusion_counts, d8_by_loops


def grid(v, cell=1.0):
    return RasterGrid(np.asarray(v, dtype=np.float32), cell, 0.0, 0.0)


def random_dem(seed, n=8):
    r = np.random.default_rng(seed)
    base = r.uniform(0, 10, (n, n))
    # pits, flats and plateaus all occur
    if seed % 3 == 0:
        base = np.round(base)
    return grid(base + 0.5 * np.add.outer(np.arange(n), np.arange(n)) * (seed % 2))


def test_monotone_plane_unchanged():
    i, j = np.mgrid[0:6, 0:7]
    plane = grid(100 + 0.5 * i + 0.25 * j)
    assert fill_depressions(plane) == plane


def test_centre_pit_raised_to_spill_plus_epsilon():
    dem = grid([[5, 4, 6], [7, 0, 8], [9, 5.5, 6]])
    out = fill_depressions(dem).values
    assert out[1, 1] == np.float32(4 + FILL_EPSILON)
    mask = np.ones((3, 3), bool)
    mask[1, 1] = False
    assert np.array_equal(out[mask], dem.values[mask])


def test_fill_rejects_all_nodata():
    with pytest.raises(ValueError):
        fill_depressions(grid(np.full((3, 3), -9999.0)))


def test_plane_directions():
    i, j = np.mgrid[0:5, 0:6]
    codes = d8_flow_direction(grid(j))
    assert np.all(codes[:, 1:] == 16) and np.all(codes[:, 0] == 0)
    codes = d8_flow_direction(grid(i + j))
    assert np.all(codes[1:, 1:] == 32)
    assert np.all(codes[0, 1:] == 16) and np.all(codes[1:, 0] == 64) and codes[0, 0] == 0


def test_tie_goes_to_smallest_code():
    assert d8_flow_direction(grid([[1, 0], [0, 0]]))[0, 0] == 1


def test_corner_accumulation():
    i, j = np.mgrid[0:3, 0:3]
    d = d8_flow_direction(grid(i + j))
    acc = flow_accumulation(d)
    assert acc[0, 0] == 8 and acc[2, 2] == 0 and acc[1, 1] == 1   # only (2, 2) drains through the centre
    assert np.array_equal(extract_streams(acc, 1), acc > 0)
    assert not extract_streams(acc, 10).any()
    with pytest.raises(ValueError):
        extract_streams(acc, 0)


def test_cycle_is_detected():
    d = np.zeros((3, 3), np.uint8)
    d[1, 1], d[1, 2] = 1, 16          # two cells pointing at each other
    with pytest.raises(CycleError):
        flow_accumulation(d)


@pytest.mark.parametrize("seed", range(20))
def test_pipeline_matches_oracles(seed):
    dem = random_dem(seed)
    filled = fill_depressions(dem)
    assert np.all(filled.values >= dem.values)
    assert fill_depressions(filled) == filled
    d = d8_flow_direction(filled)
    assert np.array_equal(d, d8_by_loops(filled.values))
    assert np.all(d[1:-1, 1:-1] != 0)      # every interior cell drains
    acc = flow_accumulation(d)
    assert np.array_equal(acc, accumulation_by_paths(d))
    outlets = d == 0
    assert int((acc[outlets] + 1).sum()) == dem.values.size


@given(st.integers(0, 2**31), st.integers(1, 30), st.integers(1, 30))
def test_threshold_monotone(seed, t1, t2):
    acc = flow_accumulation(d8_flow_direction(fill_depressions(random_dem(seed))))
    lo, hi = sorted((t1, t2))
    assert np.all(extract_streams(acc, hi) <= extract_streams(acc, lo))


def test_buffer():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    assert np.array_equal(buffer_mask(m, 0.0), m)
    plus = buffer_mask(m, 1.0)
    assert plus.sum() == 5 and plus[1, 2] and plus[2, 1] and not plus[1, 1]
    assert buffer_mask(m, 10.0, cell_size=10.0).sum() == 5
    assert buffer_mask(m, 1.5).sum() == 9
    r = np.random.default_rng(0).uniform(size=(12, 12)) < 0.1
    assert np.all(buffer_mask(r, 2.3) >= r)
    with pytest.raises(ValueError):
        buffer_mask(m, -1.0)


def test_metrics_hand_example():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, 0:4] = True
    b[0, 2:4] = True
    b[1, 0:2] = True
    m = segmentation_metrics(a, b)
    assert m["iou"] == pytest.approx(2 / 6, abs=1e-12)
    assert m["precision"] == 0.5 and m["recall"] == 0.5 and m["f1"] == 0.5
    assert m["accuracy"] == 12 / 16


def test_metrics_edge_cases():
    a = np.eye(4, dtype=bool)
    assert all(segmentation_metrics(a, a)[k] == 1.0 for k in ("iou", "precision", "recall", "f1", "accuracy"))
    m = segmentation_metrics(a, np.fliplr(a))          # anti-diagonal misses the diagonal on 4x4
    assert m["iou"] == 0 and m["precision"] == 0 and m["recall"] == 0
    empty = np.zeros((3, 3), bool)
    m = segmentation_metrics(empty, empty)
    assert m["iou"] == 1.0 and m["precision"] == 0.0 and "precision" in m["undefined"]
    with pytest.raises(ValueError):
        segmentation_metrics(empty, np.zeros((3, 4), bool))


@given(st.integers(0, 2**31))
def test_metrics_match_counting_oracle(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(size=(7, 9)) < r.uniform()
    t = r.uniform(size=(7, 9)) < r.uniform()
    tp, fp, fn, tn = confusion_counts(p, t)
    m = segmentation_metrics(p, t)
    assert m["accuracy"] == (tp + tn) / 63
    if tp + fp + fn:
        assert m["iou"] == tp / (tp + fp + fn)
    if m["precision"] > 0 and m["recall"] > 0:
        hm = 2 * m["precision"] * m["recall"] / (m["precision"] + m["recall"])
        assert m["f1"] == pytest.approx(hm, rel=1e-12)
