"""Small builders shared by the test modules."""

import numpy as np

from localbehavior.core_data import Agent, LaneMap, LaneSegment, Scene, SceneSet, Trajectory


def traj(points, scene="s0", agent="a0", region="r0", kind="observed", dt=0.5):
    return Trajectory(scene, agent, region, np.asarray(points, dtype=float), dt, kind)


def straight(start, step, n=5):
    start, step = np.asarray(start, float), np.asarray(step, float)
    return start + np.arange(n)[:, None] * step


def make_scene(scene_id, tracks, region="r0", t_fut=12, dt=0.5):
    """``tracks``: list of (agent_id, (T_obs + T_fut, 2) positions)."""
    agents = []
    for aid, pts in tracks:
        pts = np.asarray(pts, float)
        n_obs = len(pts) - t_fut
        agents.append(Agent(traj(pts[:n_obs], scene_id, aid, region, "observed", dt),
                            traj(pts[n_obs:], scene_id, aid, region, "future", dt)))
    return Scene(scene_id, region, tuple(agents), tuple(a for a, _ in tracks), region)


def scene_set(scenes, t_obs=5, t_fut=12, dt=0.5):
    return SceneSet(tuple(scenes), t_obs, t_fut, dt)


def transform_points(pts, rot=np.eye(2), shift=(0.0, 0.0)):
    """Map global points through ``x -> rot @ x + shift``."""
    return np.asarray(pts) @ np.asarray(rot).T + np.asarray(shift)


def transform_scene_set(ss, rot=np.eye(2), shift=(0.0, 0.0)):
    scenes = []
    for sc in ss:
        agents = tuple(Agent(Trajectory(a.observed.scene_id, a.agent_id, a.observed.region_id,
                                        transform_points(a.observed.points, rot, shift), a.observed.sample_period),
                             Trajectory(a.future.scene_id, a.agent_id, a.future.region_id,
                                        transform_points(a.future.points, rot, shift), a.future.sample_period,
                                        "future"))
                       for a in sc.agents)
        scenes.append(Scene(sc.scene_id, sc.region_id, agents, sc.target_agent_ids, sc.map_ref))
    return SceneSet(tuple(scenes), ss.t_obs, ss.t_fut, ss.sample_period)


def transform_lane_map(lm, rot=np.eye(2), shift=(0.0, 0.0)):
    return LaneMap(tuple(LaneSegment(ln.lane_id, transform_points(ln.polyline, rot, shift), ln.successors)
                         for ln in lm.lanes))


def quantize_scene_set(ss, step=2.0 ** -20):
    """Round coordinates to a binary grid so that translating by integers is exact."""
    q = lambda p: np.round(np.asarray(p) / step) * step
    scenes = []
    for sc in ss:
        agents = tuple(Agent(Trajectory(a.observed.scene_id, a.agent_id, a.observed.region_id,
                                        q(a.observed.points), a.observed.sample_period),
                             Trajectory(a.future.scene_id, a.agent_id, a.future.region_id, q(a.future.points),
                                        a.future.sample_period, "future"))
                       for a in sc.agents)
        scenes.append(Scene(sc.scene_id, sc.region_id, agents, sc.target_agent_ids, sc.map_ref))
    return SceneSet(tuple(scenes), ss.t_obs, ss.t_fut, ss.sample_period)


TINY_WORLD = {"grid_n": 2, "n_scenes": [12, 2, 6], "seed": 5}
TINY_TRAIN = ["--set", "feature_dim=16", "--set", "n_heads=2", "--set", "n_modes=3", "--set", "batch_size=8",
              "--epochs", "1"]


def run_pipeline(root, cli_main):
    """synth-gen -> db-build -> train x3 -> eval x3 through the CLI; returns the report paths."""
    import json

    root.mkdir(parents=True, exist_ok=True)
    spec = root / "world.json"
    spec.write_text(json.dumps(TINY_WORLD))
    data, dbs, ck = root / "data", root / "db", root / "ck"

    def ok(*argv):
        code = cli_main([str(a) for a in argv])
        assert code == 0, argv

    ok("synth-gen", "--spec", spec, "--out", data)
    for split in ("train", "test"):
        ok("db-build", "--split", data / split / "trajectories.csv", "--out", dbs / f"{split}.csv")
    ok("train", "--mode", "baseline", "--data", data, "--out", ck / "base.bin", *TINY_TRAIN)
    ok("train", "--mode", "lba", "--data", data, "--db", dbs, "--out", ck / "lba.bin", *TINY_TRAIN)
    ok("train", "--mode", "lbf", "--data", data, "--db", dbs, "--teacher", ck / "lba.bin",
       "--out", ck / "lbf.bin", *TINY_TRAIN)
    reports = []
    for name in ("base", "lba", "lbf"):
        rep = root / "reports" / f"{name}.csv"
        ok("eval", "--params", ck / f"{name}.bin", "--data", data, "--db", dbs, "--report", rep)
        reports.append(rep)
    return reports


# filled by the acceptance tests, printed in the pytest terminal summary
ACCEPTANCE_LINES: list[str] = []
