"""Regime labels, predatory incentives and losses at a few costs, reduced budget.

    python scripts/desk_regimes.py --costs 0.51 0.8 0.95 --seeds 5 --algo ppo --information partial
"""

import argparse
from collections import Counter

import numpy as np

from dynoligo.experiment import study_regimes
from dynoligo.metrics import aggregate_regime


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--costs", type=float, nargs="+", default=[0.51, 0.8, 0.95])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--algo", choices=["ppo", "reinforce"], default="ppo")
    ap.add_argument("--information", choices=["partial", "full"], default="partial")
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--trajectories", type=int, default=2000)
    ap.add_argument("--k", type=int, default=32)
    args = ap.parse_args()

    def show(run):
        print(f"c0={run.c0:.3f} seed={run.seed} {run.regime.value:<15} exits={run.exit_stages} "
              f"PI={np.round(run.PI, 4).tolist()} losses={np.round(run.losses, 4).tolist()}", flush=True)

    runs = study_regimes(args.costs, args.algo, args.information, range(args.seeds), args.iterations,
                         args.trajectories, args.k, progress=show)
    print()
    for c0 in args.costs:
        sub = [r for r in runs if r.c0 == c0]
        counts = Counter(r.regime.value for r in sub)
        print(f"c0={c0:.3f}: majority {aggregate_regime([r.regime for r in sub]).value} {dict(counts)}")


if __name__ == "__main__":
    main()
