"""Pipeline bubbles and makespans of Krul against uniform splits on random strategies.

For each random strategy the calibrated pyramid is compared with
  * a uniform split at r_c = 0.5 (strategy-unaware),
  * a uniform split storing the same bytes as the pyramid.
Writes one CSV row per strategy; ``--trace DIR`` also dumps each Krul event log.
"""

import argparse
import csv
import os
import sys

import numpy as np

from krul.analysis import DistanceMatrix
from krul.plan import RestorationPlan, build_plan
from krul.scheduler import CostModel, calibrate_rc, rc_grid, simulate_pipeline
from krul.strategy import StrategyConfig, select_strategy


def equal_bytes_uniform(cost, plan, strategy):
    L, N = plan.history_len, plan.n_layers
    target = cost.stored_bytes(plan, strategy)

    def gap(u):
        return abs(cost.stored_bytes(RestorationPlan.from_recompute(L, [u] * N), strategy) - target)

    return RestorationPlan.from_recompute(L, [min(range(L + 1), key=lambda u: (gap(u), u))] * N)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--strategies", type=int, default=50)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--history", type=int, default=2048)
    p.add_argument("--d-model", type=int, default=4096)
    p.add_argument("--ratio", type=float, default=2 / 1.35, help="full recompute time / full load time")
    p.add_argument("--grid-step", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="directory for per-strategy event logs")
    args = p.parse_args()

    N, L = args.layers, args.history
    cost = CostModel.with_ratio(N, L, args.d_model, args.ratio)
    rng = np.random.default_rng(args.seed)
    w = csv.writer(sys.stdout)
    w.writerow(["idx", "pairs", "r_c", "bubble_compute", "bubble_load", "krul_makespan",
                "uniform_half_makespan", "equal_bytes_makespan", "equal_bytes_gain"])
    if args.trace:
        os.makedirs(args.trace, exist_ok=True)
    for k in range(args.strategies):
        lir = sorted(rng.choice(N, int(rng.integers(2, N + 1)), replace=False).tolist())
        vals = np.triu(rng.random((len(lir), len(lir))), 1)
        D = DistanceMatrix(tuple(lir), vals + vals.T)
        s = select_strategy(D, lir, StrategyConfig(float(rng.uniform(0.1, 0.9))), N)
        r_c = calibrate_rc(cost, N, L, s, rc_grid(args.grid_step))
        plan = build_plan(L, N, r_c, s)
        trace = simulate_pipeline(plan, s, cost)
        half = simulate_pipeline(RestorationPlan.uniform(L, N, 0.5), s, cost).makespan
        same = simulate_pipeline(equal_bytes_uniform(cost, plan, s), s, cost).makespan
        b = trace.bubble_fraction
        w.writerow([k, len(s.pairs), r_c, f"{b['compute']:.4f}", f"{b['load']:.4f}", f"{trace.makespan:.6g}",
                    f"{half:.6g}", f"{same:.6g}", f"{(trace.makespan - same) / trace.makespan:.4%}"])
        if args.trace:
            trace.write_event_log(os.path.join(args.trace, f"strategy{k:03d}.json"))


if __name__ == "__main__":
    main()
