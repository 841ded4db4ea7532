"""Calibrated r_c and simulated TTFT speedups across compute:load cost ratios.

    python scripts/ratio_sweep.py --layers 32 --history 2048 --d-model 4096 --new 256
"""

import argparse
import csv
import sys

import numpy as np

from krul.plan import build_plan
from krul.scheduler import CostModel, calibrate_rc, rc_grid, simulated_ttft
from krul.strategy import EMPTY


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--history", type=int, default=2048)
    p.add_argument("--d-model", type=int, default=4096)
    p.add_argument("--new", type=int, default=256, help="new-turn input tokens")
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--ratios", type=float, nargs="*", default=list(np.round(np.linspace(0.5, 3.0, 11), 3)))
    args = p.parse_args()

    N, L = args.layers, args.history
    w = csv.writer(sys.stdout)
    w.writerow(["compute_to_load", "r_c", "ttft_s", "speedup_vs_recompute", "speedup_vs_load"])
    for ratio in args.ratios:
        cost = CostModel.with_ratio(N, L, args.d_model, ratio)
        r_c = calibrate_rc(cost, N, L, EMPTY, rc_grid(args.grid_step))
        ttft = simulated_ttft(build_plan(L, N, r_c), EMPTY, cost, N, args.new)
        rec = simulated_ttft(build_plan(L, N, 1.0), EMPTY, cost, N, args.new)
        load = simulated_ttft(build_plan(L, N, 0.0), EMPTY, cost, N, args.new)
        w.writerow([ratio, r_c, f"{ttft:.6g}", f"{rec / ttft:.3f}", f"{load / ttft:.3f}"])


if __name__ == "__main__":
    main()
