"""Latency of the grid-indexed behavior query against a linear scan.

Usage: python3 scripts/bench_query.py [--n 100000] [--queries 1000] [--cell 2.0]
"""
import argparse
import statistics
import time

import numpy as np

from localbehavior.behavior_db import BehaviorDatabase, linear_scan, query_local_behavior
from localbehavior.core_data import Trajectory


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--cell", type=float, default=2.0)
    ap.add_argument("--extent", type=float, default=1000.0)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    firsts = rng.uniform(0, args.extent, (args.n, 2))
    steps = np.array([1.5, 0.0]) * np.arange(5)[:, None]
    db = BehaviorDatabase("r", args.cell, [Trajectory(f"s{i:07d}", "a0", "r", p + steps, 0.5)
                                           for i, p in enumerate(firsts)], 5, 0.5)
    queries = rng.uniform(0, args.extent, (args.queries, 2))
    print("epsilon,median_index_us,median_scan_us,speedup,mean_hits")
    for eps in (0.5, 1.0, 1.5, 3.0):
        ti, ts, hits = [], [], []
        for q in queries:
            t0 = time.perf_counter()
            a = query_local_behavior(db, q, eps)
            t1 = time.perf_counter()
            linear_scan(db, q, eps)
            ts.append(time.perf_counter() - t1)
            ti.append(t1 - t0)
            hits.append(len(a))
        mi, ms = statistics.median(ti), statistics.median(ts)
        print(f"{eps},{mi * 1e6:.1f},{ms * 1e6:.1f},{ms / mi:.1f},{np.mean(hits):.2f}")


if __name__ == "__main__":
    main()
