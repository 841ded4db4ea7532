"""Storage reduction over (recompute ratio, shared layers) for a uniform split.

Reduction = full / stored with full = N*L and stored = (N - |M|) * (1 - r_c) * L.
"""

import argparse
import sys

from krul.plan import RestorationPlan
from krul.scheduler import CostModel
from krul.strategy import CompressionStrategy


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--history", type=int, default=1000)
    p.add_argument("--ratios", type=float, nargs="*", default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    args = p.parse_args()

    N, L = args.layers, args.history
    cost = CostModel(1.0, 1.0, d_model=1)
    full = cost.stored_bytes(RestorationPlan.uniform(L, N, 0.0))
    counts = range(0, N // 2 + 1, max(1, N // 8))
    sys.stdout.write("r_c\\|M|," + ",".join(str(m) for m in counts) + "\n")
    for r_c in args.ratios:
        plan = RestorationPlan.uniform(L, N, r_c)
        cells = []
        for m in counts:
            s = CompressionStrategy(tuple((N - 2 * i - 2, N - 2 * i - 1) for i in range(m)), (0.0,) * m)
            cells.append(f"{full / cost.stored_bytes(plan, s):.2f}")
        sys.stdout.write(f"{r_c}," + ",".join(cells) + "\n")


if __name__ == "__main__":
    main()
