"""Train baseline, LBA and LBF (lambda_kd 1.5 and 0) on the synthetic benchmark and print minFDE_1.

Usage: python3 scripts/benchmark.py [--seeds 0,1,2] [--train 600] [--epochs 6] [--out results.csv]
This is the same protocol the acceptance tests use for the directional criteria.
"""
import argparse
import csv
import time

import numpy as np

from localbehavior.core_data import ExperimentConfig
from localbehavior.eval import behavior_size_buckets, evaluate_model
from localbehavior.model.graph import prepare_graphs
from localbehavior.model.train import train
from localbehavior.synth import WorldSpec, make_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--train", type=int, default=600)
    ap.add_argument("--test", type=int, default=300)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--feature-dim", type=int, default=32)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    rows = []
    for seed in [int(s) for s in args.seeds.split(",")]:
        bench = make_benchmark(WorldSpec(n_scenes=(args.train, args.test, args.test), seed=seed))
        cfg = ExperimentConfig(epsilon=1.5, feature_dim=args.feature_dim, map_radius=20.0, epochs=args.epochs,
                               lr_decay_epoch=max(1, int(0.85 * args.epochs)), seed=seed)
        lm = bench.world.lane_map
        gtr = prepare_graphs(bench.splits["train"], lm, bench.dbs["train"], cfg)
        gte = prepare_graphs(bench.splits["test"], lm, bench.dbs["test"], cfg)
        gts = np.stack([g.gt_future for g in gte])
        sizes = [g.target_size for g in gte]
        teacher = None
        for label, mode, lam in (("baseline", "baseline", 0.0), ("lba", "lba", 0.0),
                                  ("lbf", "lbf", 1.5), ("lbf_lambda0", "lbf", 0.0)):
            c = cfg.with_(lambda_kd=lam)
            t0 = time.perf_counter()
            res = train(gtr, c, mode, teacher=teacher)
            rep, pred = evaluate_model(res.params, c, gte, mode, label)
            if mode == "lba":
                teacher = res.params
            buckets = behavior_size_buckets(pred, gts, sizes)
            row = {"seed": seed, "model": label, "minADE_1": rep.min_ade[1], "minFDE_1": rep.min_fde[1],
                   "MR_1": rep.miss_rate[1], f"minFDE_{cfg.n_modes}": rep.min_fde[cfg.n_modes],
                   "fde1_bucket_0_4": buckets[0].min_fde_1, "fde1_bucket_16_inf": buckets[-1].min_fde_1,
                   "kd_first": res.history[0].kd, "kd_last": res.history[-1].kd,
                   "seconds": round(time.perf_counter() - t0, 1)}
            rows.append(row)
            print(", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
    for label in ("baseline", "lba", "lbf", "lbf_lambda0"):
        print(f"mean minFDE_1 {label}: {np.mean([r['minFDE_1'] for r in rows if r['model'] == label]):.3f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
