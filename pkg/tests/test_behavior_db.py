import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_scene, scene_set, straight
from localbehavior.behavior_db import (MIN_SPEED, BehaviorDatabase, EmptyRegion, build_database, db_stats,
                                       linear_scan, load_database, passes_filters, query_local_behavior,
                                       save_database, subsample)
from localbehavior.core_data import Trajectory


def _db_from_points(first_points, cell=2.0, step=(1.5, 0.0), region="r0", names=None):
    trajs = []
    for i, p in enumerate(first_points):
        sid, aid = names[i] if names else (f"s{i:06d}", "a0")
        trajs.append(Trajectory(sid, aid, region, straight(p, step), 0.5, "observed"))
    trajs.sort(key=lambda t: t.key)
    return BehaviorDatabase(region, cell, trajs, 5, 0.5)


def _keys(bs):
    return [t.key for t in bs.members]


def test_speed_exactly_two_is_kept():
    # 1 m per 0.5 s step
    t = Trajectory("s", "a", "r", straight((0, 0), (1.0, 0)), 0.5)
    assert t.mean_speed() == MIN_SPEED
    assert passes_filters(t, 5)
    slow = Trajectory("s", "a", "r", straight((0, 0), (0.999, 0)), 0.5)
    assert not passes_filters(slow, 5)


def test_stationary_and_short_excluded():
    assert not passes_filters(Trajectory("s", "a", "r", np.zeros((5, 2)), 0.5), 5)
    assert not passes_filters(Trajectory("s", "a", "r", straight((0, 0), (3, 0), 4), 0.5), 5)


def test_filter_count_matches_linear_count(rng):
    scenes, expected = [], 0
    for k in range(1000):
        speed = rng.uniform(0.0, 4.0)
        ang = rng.uniform(0, 2 * np.pi)
        step = speed * 0.5 * np.array([np.cos(ang), np.sin(ang)])
        pts = straight(rng.uniform(-100, 100, 2), step, 17)
        scenes.append(make_scene(f"s{k:04d}", [("a0", pts)]))
        seg = np.diff(pts[:5], axis=0)
        expected += np.hypot(seg[:, 0], seg[:, 1]).sum() / (4 * 0.5) >= 2.0
    db = build_database(scene_set(scenes), "r0")
    assert db.total_count == expected
    assert all(t.kind == "observed" for t in db.trajectories)


def test_only_requested_region_is_stored():
    a = make_scene("s0", [("a0", straight((0, 0), (2, 0), 17))], region="r0")
    b = make_scene("s1", [("a0", straight((0, 0), (2, 0), 17))], region="r1")
    db = build_database(scene_set([a, b]), "r1")
    assert [t.key for t in db.trajectories] == [("s1", "a0")]


def test_empty_region_warns_but_is_valid():
    with pytest.warns(EmptyRegion):
        db = build_database(scene_set([]), "r0")
    assert db.total_count == 0
    assert len(query_local_behavior(db, (0, 0), 1.0)) == 0
    st_ = db_stats(db)
    assert st_["count"] == 0 and st_["n_cells"] == 0


def test_every_trajectory_in_its_first_point_cell(rng):
    db = _db_from_points(rng.uniform(-50, 50, (500, 2)))
    seen = 0
    for cell, idx in db.index.items():
        for i in idx:
            x, y = db.trajectories[i].points[0]
            assert cell == (math.floor(x / db.cell_size), math.floor(y / db.cell_size))
            seen += 1
    assert seen == db.total_count
    assert sum(db_stats(db)["cell_histogram"].values()) == db.total_count


def test_exact_location_hit_and_boundary_miss():
    db = _db_from_points([(3.0, 4.0), (3.5, 4.0)])
    bs = query_local_behavior(db, (3.0, 4.0), 0.5)
    assert _keys(bs) == [("s000000", "a0")]
    assert bs.distances == (0.0,)
    # first point at distance exactly epsilon is excluded
    assert len(query_local_behavior(db, (0.0, 0.0), 5.0)) == 0
    assert len(query_local_behavior(db, (0.0, 0.0), 5.0 + 1e-12)) == 1


def test_ordering_and_tie_break():
    names = [("b", "a1"), ("a", "a9"), ("a", "a2"), ("c", "a0")]
    db = _db_from_points([(1, 0), (0, 1), (-1, 0), (0.5, 0)], names=names)
    bs = query_local_behavior(db, (0, 0), 2.0)
    assert _keys(bs) == [("c", "a0"), ("a", "a2"), ("a", "a9"), ("b", "a1")]
    assert list(bs.distances) == sorted(bs.distances)


def test_exclusion():
    db = _db_from_points([(0, 0), (0.1, 0)])
    bs = query_local_behavior(db, (0, 0), 1.0, exclude={("s000000", "a0")})
    assert _keys(bs) == [("s000001", "a0")]


def test_subsample():
    db = _db_from_points([(0.01 * i, 0) for i in range(40)])
    bs = query_local_behavior(db, (0, 0), 1.0)
    assert len(subsample(bs, 16)) == 16
    assert _keys(subsample(bs, 16)) == _keys(bs)[:16]
    small = query_local_behavior(db, (0, 0), 0.025)
    assert _keys(subsample(small, 16)) == _keys(small)
    assert len(subsample(bs, 0)) == 0
    tie = _db_from_points([(1, 0), (-1, 0), (0, 1)], names=[("z", "a"), ("m", "b"), ("m", "a")])
    assert _keys(subsample(query_local_behavior(tie, (0, 0), 2.0), 2)) == [("m", "a"), ("m", "b")]
    with pytest.raises(ValueError):
        subsample(bs, -1)


def test_epsilon_larger_than_cell_scans_ring(rng):
    db = _db_from_points(rng.uniform(-20, 20, (3000, 2)), cell=0.5)
    for q in rng.uniform(-20, 20, (50, 2)):
        assert _keys(query_local_behavior(db, q, 3.7)) == _keys(linear_scan(db, q, 3.7))


pt = st.tuples(st.floats(-30, 30), st.floats(-30, 30))


@given(st.lists(pt, min_size=0, max_size=80), pt, st.floats(0.01, 6.0), st.floats(0.3, 4.0))
def test_index_equals_scan_property(points, q, eps, cell):
    db = _db_from_points(points, cell=cell)
    assert _keys(query_local_behavior(db, q, eps)) == _keys(linear_scan(db, q, eps))


@given(st.lists(pt, min_size=1, max_size=60), pt, st.floats(0.01, 5.0), st.floats(0.0, 3.0))
def test_monotone_in_epsilon(points, q, e1, extra):
    db = _db_from_points(points)
    small = set(_keys(query_local_behavior(db, q, e1)))
    big = set(_keys(query_local_behavior(db, q, e1 + extra)))
    assert small <= big


@given(st.lists(pt, min_size=1, max_size=40, unique=True), st.randoms(use_true_random=False))
def test_insertion_order_independent(points, r):
    names = [(f"s{i:03d}", "a0") for i in range(len(points))]
    pairs = list(zip(points, names))
    r.shuffle(pairs)
    db1 = _db_from_points(points, names=names)
    trajs = [Trajectory(n[0], n[1], "r0", straight(p, (1.5, 0)), 0.5) for p, n in pairs]
    db2 = BehaviorDatabase("r0", 2.0, trajs, 5, 0.5)
    for q in points[:5]:
        assert _keys(query_local_behavior(db1, q, 2.0)) == _keys(query_local_behavior(db2, q, 2.0))


@given(st.lists(pt, min_size=1, max_size=30))
def test_strict_boundary_property(points):
    db = _db_from_points(points)
    q = (0.0, 0.0)
    for t in db.trajectories:
        d = float(np.hypot(t.points[0, 0], t.points[0, 1]))
        if d > 0:
            assert t.key not in set(_keys(query_local_behavior(db, q, d)))


def test_snapshot_reload_reproduces_queries(tmp_path, rng):
    db = _db_from_points(rng.uniform(-10, 10, (400, 2)) + rng.normal(0, 1e-7, (400, 2)))
    p = tmp_path / "db.csv"
    save_database(db, p)
    back = load_database(p)
    assert (back.region_id, back.cell_size, back.total_count) == (db.region_id, db.cell_size, db.total_count)
    for q in rng.uniform(-10, 10, (100, 2)):
        a = query_local_behavior(db, q, 1.0)
        b = query_local_behavior(back, q, 1.0)
        assert _keys(a) == _keys(b) and a.distances == b.distances
