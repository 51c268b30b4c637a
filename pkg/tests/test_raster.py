import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_scene, straight
from localbehavior.core_data import LaneMap, LaneSegment
from localbehavior.raster import (Grid, GridMismatch, TargetOutsideGrid, check_same_grid, rasterize_polyline,
                                  render_behavior_prob_map, render_scene_image, write_matrix_csv, write_pgm)

G8 = Grid(8, 8, 1.0, (0.0, 0.0))


def _chord_length(p0, p1, r, c, res=1.0, origin=(0.0, 0.0)):
    """Length of the part of segment p0-p1 inside the closed pixel square (independent clip)."""
    x0, y0 = (p0[0] - origin[0]) / res, (p0[1] - origin[1]) / res
    x1, y1 = (p1[0] - origin[0]) / res, (p1[1] - origin[1]) / res
    lo, hi = 0.0, 1.0
    for a, d, mn, mx in ((x0, x1 - x0, c, c + 1), (y0, y1 - y0, r, r + 1)):
        if d == 0:
            if not mn <= a <= mx:
                return -1.0
            continue
        t1, t2 = (mn - a) / d, (mx - a) / d
        lo, hi = max(lo, min(t1, t2)), min(hi, max(t1, t2))
    if lo > hi:
        return -1.0
    return (hi - lo) * math.hypot(x1 - x0, y1 - y0) * res


def _oracle_cover(points, grid):
    out = set()
    for a, b in zip(points[:-1], points[1:]):
        for r in range(grid.H):
            for c in range(grid.W):
                if _chord_length(a, b, r, c, grid.resolution, grid.origin) > 1e-9:
                    out.add((r, c))
    return out


def _dense_cover(points, grid, step):
    out = set()
    for a, b in zip(points[:-1], points[1:]):
        n = max(2, int(np.ceil(np.hypot(*(b - a)) / step)) + 1)
        for t in np.linspace(0, 1, n):
            rc = grid.pixel_of(*(a + t * (b - a)))
            if grid.contains(rc):
                out.add(rc)
    return out


def _count_oracle(trajs, grid):
    counts = np.zeros((grid.H, grid.W))
    for t in trajs:
        for (r, c) in _oracle_cover(np.asarray(t), grid):
            counts[r, c] += 1
    return counts / counts.max() if counts.max() > 0 else counts


def test_horizontal_segment_four_pixels():
    assert rasterize_polyline([(0.5, 2.5), (3.5, 2.5)], G8) == {(2, 0), (2, 1), (2, 2), (2, 3)}


def test_degenerate_point():
    assert rasterize_polyline([(3.2, 5.7), (3.2, 5.7)], G8) == {(5, 3)}
    assert rasterize_polyline([(3.2, 5.7)], G8) == {(5, 3)}


def test_outside_segments_contribute_nothing():
    assert rasterize_polyline([(-5, -5), (-1, -3)], G8) == set()
    # crossing: only the inside part
    assert rasterize_polyline([(-3, 0.5), (20, 0.5)], G8) == {(0, c) for c in range(8)}


def test_diagonal_through_corners_is_exact_diagonal():
    assert rasterize_polyline([(0.0, 0.0), (3.999, 3.999)], G8) == {(i, i) for i in range(4)}


@given(st.lists(st.tuples(st.floats(-2, 10), st.floats(-2, 10)), min_size=2, max_size=6))
def test_supercover_matches_exact_oracle(pts):
    pts = np.asarray(pts)
    got = rasterize_polyline(pts, G8)
    exact = _oracle_cover(pts, G8)
    # pixels touched only at a boundary line or corner are decided by the half-open convention,
    # so compare up to pixels whose chord has zero length
    assert exact <= got
    for rc in got - exact:
        assert max(_chord_length(a, b, *rc) for a, b in zip(pts[:-1], pts[1:])) >= -1e-9


def test_supercover_vs_dense_sampling(rng):
    grid = Grid(16, 16, 0.5, (-4.0, -4.0))
    for _ in range(100):
        pts = rng.uniform(-5, 5, (int(rng.integers(2, 6)), 2))
        got = rasterize_polyline(pts, grid)
        dense = _dense_cover(pts, grid, grid.resolution / 10)
        assert dense <= got
        # anything the sampler missed is a corner clip shorter than the sample step
        for rc in got - dense:
            chord = max(_chord_length(a, b, *rc, grid.resolution, grid.origin) for a, b in zip(pts[:-1], pts[1:]))
            assert chord <= grid.resolution / 10 + 1e-9


def test_prob_map_analytic_cases():
    assert not render_behavior_prob_map([], G8).values.any()
    one = render_behavior_prob_map([np.array([(0.5, 3.5), (5.5, 3.5)])], G8).values
    assert set(np.unique(one)) == {0.0, 1.0}
    assert one[3, :6].tolist() == [1.0] * 6 and one.sum() == 6
    two = render_behavior_prob_map([np.array([(0.5, 3.5), (5.5, 3.5)]),
                                    np.array([(3.5, 3.5), (7.5, 3.5)])], G8).values
    assert two[3].tolist() == [0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 0.5, 0.5]
    assert set(np.unique(two[two > 0])) == {0.5, 1.0}


def test_prob_map_counts_once_per_trajectory():
    loop = np.array([(0.5, 0.5), (6.5, 0.5), (6.5, 0.6), (0.5, 0.6)])
    other = np.array([(0.5, 4.5), (2.5, 4.5)])
    v = render_behavior_prob_map([loop, other], G8).values
    assert v.max() == 1.0 and v[0, 0] == 1.0 and v[4, 0] == 1.0


def test_random_8x8_matches_count_oracle(rng):
    for _ in range(100):
        trajs = [rng.uniform(-1, 9, (5, 2)) for _ in range(int(rng.integers(0, 21)))]
        got = render_behavior_prob_map(trajs, G8).values
        np.testing.assert_array_equal(got, _count_oracle(trajs, G8))
        assert got.min() >= 0 and got.max() <= 1
        if got.any():
            assert got.max() == 1.0


@given(st.lists(st.lists(st.tuples(st.floats(0, 8), st.floats(0, 8)), min_size=2, max_size=4), max_size=6),
       st.randoms(use_true_random=False))
def test_prob_map_permutation_invariant(trajs, r):
    a = render_behavior_prob_map([np.asarray(t) for t in trajs], G8).values
    shuffled = list(trajs)
    r.shuffle(shuffled)
    b = render_behavior_prob_map([np.asarray(t) for t in shuffled], G8).values
    np.testing.assert_array_equal(a, b)


@given(st.lists(st.lists(st.tuples(st.floats(0, 8), st.floats(0, 8)), min_size=2, max_size=4), max_size=5),
       st.lists(st.tuples(st.floats(0, 8), st.floats(0, 8)), min_size=2, max_size=4))
def test_coverage_monotone(trajs, extra):
    def counts(ts):
        c = np.zeros((8, 8))
        for t in ts:
            for rc in rasterize_polyline(np.asarray(t), G8):
                c[rc] += 1
        return c

    assert np.all(counts(trajs + [extra]) >= counts(trajs))


def _scene():
    return make_scene("s", [("a0", straight((16.2, 16.1), (1.0, 0.0), 17)),
                            ("a1", straight((10.3, 20.2), (0.0, 1.0), 17))])


def test_scene_image_channels_and_target():
    sc = _scene()
    grid = Grid.centered((20.2, 16.1), 64, 0.5)
    lm = LaneMap((LaneSegment("l", [(0.0, 16.0), (40.0, 16.0)]),))
    img = render_scene_image(sc, "a0", grid, lane_map=lm)
    assert img.channels.shape == (5 + 2, 64, 64)
    assert set(np.unique(img.channels)) <= {0.0, 1.0}
    assert img.target.sum() == 1.0
    assert img.target[32, 32] == 1.0  # target sits at the grid centre
    assert img.lane.sum() == 64  # one full row
    # per-step occupancy equals a direct recount of in-grid positions
    for t in range(5):
        expect = {grid.pixel_of(*a.observed.points[t]) for a in sc.agents}
        expect = {rc for rc in expect if grid.contains(rc)}
        assert img.channels[1 + t].sum() == len(expect)


def test_scene_without_other_agents_and_no_lanes():
    sc = make_scene("s", [("a0", straight((1.1, 1.1), (0.5, 0.0), 17))])
    img = render_scene_image(sc, "a0", Grid(8, 8, 1.0, (0.0, 0.0)))
    assert img.lane.sum() == 0
    assert img.channels[1:1 + 5].sum() == 5


def test_target_outside_grid():
    with pytest.raises(TargetOutsideGrid):
        render_scene_image(_scene(), "a0", Grid(8, 8, 1.0, (100.0, 100.0)))


def test_grid_mismatch_and_writers(tmp_path):
    check_same_grid(G8, Grid(8, 8, 1.0, (0.0, 0.0)))
    with pytest.raises(GridMismatch):
        check_same_grid(G8, Grid(8, 8, 0.5, (0.0, 0.0)))
    v = render_behavior_prob_map([np.array([(0.5, 0.5), (3.5, 0.5)])], G8).values
    write_matrix_csv(v, tmp_path / "m.csv")
    back = np.loadtxt(tmp_path / "m.csv", delimiter=",")
    np.testing.assert_array_equal(back, v)
    write_pgm(v, tmp_path / "m.pgm")
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n8 8\n255\n") and len(data) == len(b"P5\n8 8\n255\n") + 64
    with pytest.raises(ValueError):
        Grid(0, 4, 1.0, (0, 0))
