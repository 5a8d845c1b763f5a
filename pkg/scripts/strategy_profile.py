"""Train one profile and plot its prices per round, lines stopping where a firm exits.

    python scripts/strategy_profile.py --c0 0.51 --seed 0 --out results/strategy
"""

import argparse
from pathlib import Path

from dynoligo.experiment import plot_strategy
from dynoligo.learn import TrainConfig, train_selfplay
from dynoligo.market import MarketConfig, rollout
from dynoligo.profiles import save_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--c0", type=float, default=0.51)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--algo", choices=["ppo", "reinforce"], default="ppo")
    ap.add_argument("--information", choices=["partial", "full"], default="partial")
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--trajectories", type=int, default=2000)
    ap.add_argument("--out", default="results/strategy")
    args = ap.parse_args()

    config = MarketConfig(3, 4, (args.c0, 0.8, 0.8), (1.0,) * 3, True, args.information)
    tc = TrainConfig(algo=args.algo, iterations=args.iterations, trajectories_per_iteration=args.trajectories,
                     seed=args.seed)
    learned = train_selfplay(config, args.algo, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = rollout(learned.policies(), config)
    traj.to_csv(out / "trajectory.csv")
    save_profile(out / "profile.npz", learned)
    plot_strategy(out / "trajectory.csv", out / "strategy.svg", title=f"$c_0={args.c0}$, {args.algo}")
    print(traj.prices.round(4))
    print(f"exits: {traj.exit_stage()}  wrote {out / 'strategy.svg'}")


if __name__ == "__main__":
    main()
