import json
from collections import Counter

import numpy as np
import pytest

from localbehavior.behavior_db import EmptyRegion, passes_filters
from localbehavior.synth import (WorldSpec, classify_turn, expected_lane_count, generate_world, make_benchmark,
                                 save_world, simulate_agent, simulate_agents, with_seed)

SMALL = WorldSpec(n_scenes=(40, 10, 10))


def _dist_to_lanes(p, segs):
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
    proj = a + t[:, None] * ab
    return np.hypot(*(p - proj).T).min()


def test_single_intersection_has_four_approaches():
    w = generate_world(WorldSpec(grid_n=1))
    ids = [ln.lane_id for ln in w.lane_map.lanes]
    assert sum(i.startswith("in_") for i in ids) == 4
    assert sum(i.startswith("cx_") for i in ids) == 12
    assert len(ids) == expected_lane_count(1)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_lane_count_formula_by_enumeration(n):
    w = generate_world(WorldSpec(grid_n=n))
    kinds = Counter(ln.lane_id.split("_")[0] for ln in w.lane_map.lanes)
    # arrivals: 4 per intersection; connectors: 3 per arrival; boundary exits: 4 per side
    assert kinds == {"in": 4 * n * n, "cx": 12 * n * n, "out": 4 * n}
    assert len(w.lane_map.lanes) == expected_lane_count(n) == 16 * n * n + 4 * n


def test_world_is_deterministic_and_successors_resolve():
    a, b = generate_world(SMALL), generate_world(SMALL)
    np.testing.assert_array_equal(a.turn_priors, b.turn_priors)
    for la, lb in zip(a.lane_map.lanes, b.lane_map.lanes):
        assert la.lane_id == lb.lane_id and np.array_equal(la.polyline, lb.polyline)
    assert np.allclose(a.turn_priors.sum(axis=1), 1.0, atol=1e-9)
    assert not np.array_equal(generate_world(with_seed(SMALL, 1)).turn_priors, a.turn_priors)


def test_same_seed_bit_identical_scenes():
    w = generate_world(SMALL)
    s1 = simulate_agents(w, SMALL, "train")
    s2 = simulate_agents(w, SMALL, "train")
    for a, b in zip(s1.scenes, s2.scenes):
        for x, y in zip(a.agents, b.agents):
            assert np.array_equal(x.observed.points, y.observed.points)
            assert np.array_equal(x.future.points, y.future.points)


def test_splits_use_disjoint_streams():
    w = generate_world(SMALL)
    tr = simulate_agents(w, SMALL, "train", n_scenes=5)
    te = simulate_agents(w, SMALL, "test", n_scenes=5)
    assert not np.array_equal(tr.scenes[0].agents[0].observed.points, te.scenes[0].agents[0].observed.points)
    assert tr.scenes[0].scene_id.startswith("train_") and te.scenes[0].scene_id.startswith("test_")


def test_zero_noise_straight_prior_stays_on_centerline():
    spec = WorldSpec(grid_n=1, turn_priors=((0.0, 1.0, 0.0),), lateral_noise_sd=0.0, speed_range=(2.5, 3.0),
                     n_scenes=(30, 0, 0))
    w = generate_world(spec)
    segs = w.lane_map.segments()
    ss = simulate_agents(w, spec, "train")
    for sc in ss:
        assert sc.region_id == w.world_id
        for ag in sc.agents:
            for p in ag.future.points:
                assert _dist_to_lanes(p[None], segs) < 1e-9


def test_turn_frequencies_follow_prior():
    prior = (0.8, 0.2, 0.0)
    spec = WorldSpec(grid_n=1, turn_priors=(prior,))
    w = generate_world(spec)
    rng = np.random.default_rng(5)
    lanes = w.lane_map.by_id()
    first_turns = []
    while len(first_turns) < 10_000:
        _, turns, _ = simulate_agent(w, spec, rng, center=0, lane_index=lanes)
        if turns:
            first_turns.append(turns[0][1])
    freq = np.bincount(first_turns, minlength=3) / len(first_turns)
    assert np.all(np.abs(freq - np.array(prior)) <= 0.02)


def test_all_agents_pass_speed_filter():
    b = make_benchmark(SMALL)
    obs = list(b.splits["train"].observed())
    assert all(passes_filters(t, SMALL.T_obs) for t in obs)
    assert b.dbs["train"].total_count == len(obs)


def test_benchmark_per_split_databases():
    b = make_benchmark(SMALL)
    ids = {s: {t.key for t in b.dbs[s].trajectories} for s in b.dbs}
    assert not ids["train"] & ids["test"] and not ids["train"] & ids["val"] and not ids["val"] & ids["test"]
    for s, ss in b.splits.items():
        assert b.dbs[s].total_count == sum(passes_filters(t, ss.t_obs) for t in ss.observed())


def test_empty_val_split_gives_empty_db():
    with pytest.warns(EmptyRegion):
        b = make_benchmark(WorldSpec(n_scenes=(5, 0, 5)))
    assert len(b.splits["val"]) == 0 and b.dbs["val"].total_count == 0


def test_spec_validation_and_record(tmp_path):
    with pytest.raises(ValueError):
        WorldSpec(speed_range=(1.0, 3.0))
    with pytest.raises(ValueError):
        WorldSpec(grid_n=1, turn_priors=((0.5, 0.4, 0.0),))
    spec = WorldSpec(n_scenes=(3, 1, 1))
    assert WorldSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    w = generate_world(spec)
    save_world(w, spec, tmp_path / "world.json")
    rec = json.loads((tmp_path / "world.json").read_text())
    assert rec["seed"] == spec.seed and np.allclose(rec["turn_priors"], w.turn_priors)


def test_classify_turn():
    assert classify_turn(np.array([(0, 0), (1, 0), (2, 0)])) == 1
    assert classify_turn(np.array([(0, 0), (1, 0), (1, 1)])) == 0
    assert classify_turn(np.array([(0, 0), (1, 0), (1, -1)])) == 2
