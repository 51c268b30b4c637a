"""Command-line entry point: ``localbehavior <subcommand> ...``.

Every subcommand writes one JSON run manifest (``--manifest``, default
``<primary output>.manifest.json``) recording argv, the resolved config,
seeds, input/output checksums and wall-clock time. ``replay --manifest``
reruns the recorded argv and verifies the output checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import behavior_db as bdb
from . import core_data as cd
from . import diffcore as dc
from . import eval as ev
from . import raster as rs
from . import synth

log = logging.getLogger("localbehavior")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    def __init__(self, flag: str, msg: str):
        super().__init__(f"{flag}: {msg}")
        self.flag = flag


# ---------------------------------------------------------------- manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checksums(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            if q.exists() and not q.name.endswith(".manifest.json"):
                out[str(q)] = sha256_file(q)
    return out


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    threads: int = 1

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class Run:
    """What a subcommand reports back for the manifest."""

    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)


# ---------------------------------------------------------------- helpers


def _need_file(flag: str, path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(flag, f"file not found: {path}")
    return p


def _need_dir(flag: str, path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(flag, f"directory not found: {path}")
    return p


def _parse_set(items) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise UsageError("--set", f"expected KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args, base: dict | None = None) -> cd.ExperimentConfig:
    """Defaults < ``base`` (e.g. a checkpoint's config) < ``--config`` file < flags."""
    d = dict(base or {})
    if getattr(args, "config", None):
        try:
            d.update(cd.read_flat_config(_need_file("--config", args.config)))
        except (cd.DataError, json.JSONDecodeError) as exc:
            raise UsageError("--config", str(exc)) from exc
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("epsilon", "epsilon"),
                      ("lambda_kd", "lambda_kd"), ("kd_sites", "kd_sites"), ("pathway", "pathway")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    d.update(_parse_set(getattr(args, "set", None)))
    try:
        return cd.ExperimentConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise UsageError("--config/--set", str(exc)) from exc


def _split_file(flag: str, data: str, split: str) -> Path:
    d = _need_dir(flag, data)
    return _need_file(flag, d / split / "trajectories.csv")


def _db_path(flag: str, db: str, split: str) -> Path:
    p = Path(db)
    if p.is_dir():
        p = p / f"{split}.csv"
    return _need_file(flag, p)


def _load_inputs(args, cfg: cd.ExperimentConfig, split: str, need_db: bool):
    traj = _split_file("--data", args.data, split)
    scenes = cd.load_scenes(traj, cfg.T_obs, cfg.T_fut, cfg.sample_period)
    map_path = _need_file("--data", Path(args.data) / "map.csv")
    lane_map = cd.load_map(map_path)
    db, db_file = None, None
    if need_db:
        if not args.db:
            raise UsageError("--db", "required for this mode")
        db_file = _db_path("--db", args.db, split)
        db = bdb.load_database(db_file)
    return scenes, lane_map, db, [traj, map_path] + ([db_file] if db_file else [])


def _samples(scenes, lane_map, db, cfg):
    if cfg.pathway == "raster":
        from .model.raster_nets import prepare_raster_samples

        return prepare_raster_samples(scenes, lane_map, db, cfg)
    from .model.graph import prepare_graphs

    return prepare_graphs(scenes, lane_map, db, cfg)


# ---------------------------------------------------------------- subcommands


def cmd_synth_gen(args) -> Run:
    spec_path = _need_file("--spec", args.spec) if args.spec else None
    try:
        spec = synth.WorldSpec.from_file(spec_path) if spec_path else synth.WorldSpec()
        if args.seed is not None:
            spec = synth.with_seed(spec, args.seed)
    except (ValueError, TypeError) as exc:
        raise UsageError("--spec", str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = synth.generate_world(spec)
    for split in SPLITS:
        (out / split).mkdir(exist_ok=True)
        cd.save_scenes(synth.simulate_agents(world, spec, split), out / split / "trajectories.csv")
    cd.save_map(world.lane_map, out / "map.csv")
    synth.save_world(world, spec, out / "world.json")
    return Run([spec_path] if spec_path else [], [out], spec.to_dict(), [spec.seed])


def cmd_db_build(args) -> Run:
    split = _need_file("--split", args.split)
    scenes = cd.load_scenes(split, args.t_obs, args.t_fut, args.sample_period)
    region = args.region
    if region is None:
        regions = sorted({s.region_id for s in scenes})
        if len(regions) != 1:
            raise UsageError("--region", f"split holds regions {regions}; pick one")
        region = regions[0]
    db = bdb.build_database(scenes, region, args.cell_size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    bdb.save_database(db, args.out)
    print(f"{region}: {db.total_count} trajectories")
    return Run([split], [args.out], {"region": region, "cell_size": args.cell_size, "t_obs": args.t_obs})


def cmd_db_query(args) -> Run:
    db_file = _need_file("--db", args.db)
    if not args.epsilon > 0:
        raise UsageError("--epsilon", "must be positive")
    db = bdb.load_database(db_file)
    bs = bdb.query_local_behavior(db, (args.x, args.y), args.epsilon)
    lines = ["scene_id,agent_id,distance"]
    lines += [f"{t.scene_id},{t.agent_id},{cd.fmt_float(float(d))}" for t, d in zip(bs.members, bs.distances)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return Run([db_file], [args.out] if args.out else [], {"x": args.x, "y": args.y, "epsilon": args.epsilon})


def cmd_render(args) -> Run:
    cfg = resolve_config(args)
    scenes, lane_map, db, inputs = _load_inputs(args, cfg, args.split, need_db=True)
    by_id = scenes.by_id()
    if args.scene not in by_id:
        raise UsageError("--scene", f"no scene {args.scene!r} in {args.split}")
    sc = by_id[args.scene]
    try:
        ag = sc.agent(args.agent)
    except KeyError as exc:
        raise UsageError("--agent", f"no agent {args.agent!r} in scene {args.scene}") from exc
    bs = bdb.query_local_behavior(db, cd.current_location(ag.observed), cfg.epsilon, exclude={ag.observed.key})
    grid = rs.Grid.centered(cd.current_location(ag.observed), cfg.raster_size, cfg.raster_resolution)
    pm = rs.render_behavior_prob_map(bs, grid)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    rs.write_matrix_csv(pm.values, args.out)
    outs = [args.out]
    if args.pgm:
        rs.write_pgm(pm.values, args.pgm)
        outs.append(args.pgm)
    print(f"{len(bs)} behavior trajectories rendered")
    return Run(inputs, outs, cfg.to_dict(), [cfg.seed])


def cmd_train(args) -> Run:
    from .model.train import train

    cfg = resolve_config(args)
    mode = args.mode
    scenes, lane_map, db, inputs = _load_inputs(args, cfg, args.split, need_db=mode != "baseline")
    teacher = None
    if mode == "lbf":
        if not args.teacher:
            raise UsageError("--teacher", "lbf training needs a teacher checkpoint")
        teacher = dc.load_params(_need_file("--teacher", args.teacher))
        if teacher.meta.get("mode") != "lba":
            raise UsageError("--teacher", "checkpoint is not an lba model")
        inputs.append(args.teacher)
    samples = _samples(scenes, lane_map, db, cfg)
    res = train(samples, cfg, mode, teacher=teacher)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dc.save_params(res.params, args.out)
    hist = Path(str(args.out) + ".history.csv")
    with open(hist, "w") as fh:
        fh.write("epoch,lr,loss,pred,kd,kd_raw\n")
        for h in res.history:
            fh.write(",".join([str(h.epoch)] + [cd.fmt_float(float(v)) for v in (h.lr, h.loss, h.pred, h.kd, h.kd_raw)]) + "\n")
    return Run(inputs, [args.out, hist], cfg.to_dict(), [cfg.seed])


def cmd_eval(args) -> Run:
    ps = dc.load_params(_need_file("--params", args.params))
    mode = ps.meta.get("mode")
    cfg = resolve_config(args, base=ps.meta.get("config"))
    scenes, lane_map, db, inputs = _load_inputs(args, cfg, args.split, need_db=bool(args.db))
    if mode == "lba" and db is None:
        raise UsageError("--db", "an lba checkpoint needs the behavior database")
    samples = _samples(scenes, lane_map, db, cfg)
    report, pred = ev.evaluate_model(ps, cfg, samples, mode, label=args.label or mode,
                                     ks=tuple(sorted({1, cfg.n_modes})))
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    ev.write_report([report], args.report)
    outs = [args.report]
    if args.svg:
        ev.write_profile_svg(report.horizon_fde, args.svg, f"{report.label} per-step error")
        outs.append(args.svg)
    print(f"{report.label}: minADE_1={report.min_ade[1]:.3f} minFDE_1={report.min_fde[1]:.3f} "
          f"MR_1={report.miss_rate[1]:.3f} (n={report.n})")
    return Run([args.params] + inputs, outs, cfg.to_dict(), [cfg.seed])


def cmd_ablate(args) -> Run:
    grid_file = _need_file("--grid", args.grid)
    try:
        g = json.loads(grid_file.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError("--grid", f"not valid JSON: {exc}") from exc
    try:
        spec = synth.WorldSpec.from_dict(g.get("world", {}))
        cfg = cd.ExperimentConfig.from_dict(g.get("config", {}))
    except (ValueError, TypeError) as exc:
        raise UsageError("--grid", str(exc)) from exc
    bench = synth.make_benchmark(spec, cell_size=g.get("cell_size", 2.0))
    rows = ev.ablation_sweep(bench, cfg, epsilons=g.get("epsilon", (0.5, 1.0, 1.5)),
                             lambdas=g.get("lambda_kd", (0.0, 1.0, 1.5, 2.0)),
                             kd_sites=g.get("kd_sites", (1, 2)), seeds=g.get("seeds", (cfg.seed,)),
                             eps_scale=float(g.get("eps_scale", 1.0)),
                             include_baseline=bool(g.get("baseline", True)))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ev.write_sweep(rows, args.out)
    return Run([grid_file], [args.out], {"world": spec.to_dict(), "config": cfg.to_dict()},
               list(g.get("seeds", [cfg.seed])))


def cmd_stats(args) -> Run:
    db_file = _need_file("--db", args.db)
    map_file = _need_file("--map", args.map)
    db = bdb.load_database(db_file)
    rows = ev.lane_behavior_stats(db, cd.load_map(map_file), args.epsilon)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ev.write_lane_stats(rows, args.out)
    st = bdb.db_stats(db)
    print(f"{st['count']} trajectories, {len(rows)} lane segments with behavior data")
    return Run([db_file, map_file], [args.out], {"epsilon": args.epsilon})


COMMANDS = {
    "synth-gen": cmd_synth_gen, "db-build": cmd_db_build, "db-query": cmd_db_query, "render": cmd_render,
    "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "stats": cmd_stats,
}


def _primary_output(args) -> str | None:
    for name in ("out", "report"):
        v = getattr(args, name, None)
        if v:
            return v
    return None


# ---------------------------------------------------------------- parser


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key-value config file (JSON or key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="localbehavior", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", help="where to write the run manifest")
        return p

    p = add("synth-gen", "generate a synthetic world and its splits")
    p.add_argument("--spec", help="world spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("db-build", "build a behavior database from one split")
    p.add_argument("--split", required=True, help="trajectories.csv of the split")
    p.add_argument("--region")
    p.add_argument("--out", required=True)
    p.add_argument("--cell-size", type=float, default=2.0)
    p.add_argument("--t-obs", type=int, default=5)
    p.add_argument("--t-fut", type=int, default=12)
    p.add_argument("--sample-period", type=float, default=0.5)

    p = add("db-query", "list local behavior at a location")
    p.add_argument("--db", required=True)
    p.add_argument("--x", type=float, required=True)
    p.add_argument("--y", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--out")

    p = add("render", "render one agent's behavior probability map")
    p.add_argument("--data", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scene", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--out", required=True, help="CSV matrix")
    p.add_argument("--pgm", help="optional grayscale image")
    p.add_argument("--epsilon", type=float)
    _config_flags(p)

    p = add("train", "train a baseline, lba or lbf model")
    p.add_argument("--mode", required=True, choices=("baseline", "lba", "lbf"))
    p.add_argument("--data", required=True)
    p.add_argument("--db")
    p.add_argument("--split", default="train")
    p.add_argument("--teacher", help="lba checkpoint (lbf mode)")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lambda-kd", dest="lambda_kd", type=float)
    p.add_argument("--kd-sites", dest="kd_sites", type=int, choices=(1, 2))
    p.add_argument("--pathway", choices=("graph", "raster"))
    _config_flags(p)

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--db")
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.add_argument("--label")
    p.add_argument("--svg", help="optional per-step error plot")
    p.add_argument("--epsilon", type=float)
    _config_flags(p)

    p = add("ablate", "epsilon x lambda_kd x kd_sites sweep")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)

    p = add("stats", "per-lane-segment behavior statistics")
    p.add_argument("--db", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--epsilon", type=float, default=1.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="rerun a manifest and verify output checksums")
    p.add_argument("--manifest", required=True)
    return ap


def _threads() -> int:
    raw = os.environ.get("BF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError("BF_THREADS", f"not an integer: {raw!r}") from None
    if n < 1:
        raise UsageError("BF_THREADS", "must be >= 1")
    return n


def run(argv: list[str]) -> RunManifest:
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        return replay(args.manifest)
    n = _threads()
    t0 = time.perf_counter()
    with threadpool_limits(limits=n):
        res = COMMANDS[args.command](args)
    man = RunManifest(args.command, list(argv), res.config, [int(s) for s in res.seeds],
                      _checksums(p for p in res.inputs if p), _checksums(p for p in res.outputs if p),
                      round(time.perf_counter() - t0, 3), n)
    target = args.manifest or (f"{_primary_output(args)}.manifest.json" if _primary_output(args) else None)
    if target:
        man.write(target)
    return man


def replay(path) -> RunManifest:
    old = RunManifest.read(_need_file("--manifest", path))
    argv = list(old.argv)
    # keep the original manifest intact; the rerun writes a sibling
    if "--manifest" in argv:
        i = argv.index("--manifest")
        argv[i + 1] = str(argv[i + 1]) + ".replay"
    else:
        argv += ["--manifest", str(path) + ".replay"]
    new = run(argv)
    bad = sorted(k for k in old.outputs if new.outputs.get(k) != old.outputs[k])
    if bad:
        raise UsageError("--manifest", f"replay produced different outputs: {bad}")
    print(f"replay ok: {len(old.outputs)} outputs identical")
    return new


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (cd.DataError, cd.IoFailure, rs.GridMismatch, rs.TargetOutsideGrid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
