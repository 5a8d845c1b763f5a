"""Command line entry point ``dynoligo``.

Exit status is 0 on success, 1 when work ran but failed (including failed
sweep cells), and 2 for invalid invocations or configs. Failures print one
line ``error: CODE: message`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DynOligoError

OK, FAILED, INVALID = 0, 1, 2


class UsageError(DynOligoError):
    code = "USAGE"


def _config(args):
    from .market import load_config
    if not args.config:
        raise UsageError("--config is required")
    return load_config(args.config)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _profile_for(args, config):
    """Policies from --profile, or the analytic no-dropout equilibrium of ``config``."""
    from .analytic import baseline_equilibrium
    from .profiles import load_profile
    if getattr(args, "profile", None):
        saved = load_profile(args.profile)
        if saved.config.n_agents != config.n_agents or saved.config.horizon != config.horizon:
            from .errors import ConfigMismatch
            raise ConfigMismatch("profile and config disagree on agents or horizon")
        return saved.policies()
    return baseline_equilibrium(config)


def cmd_simulate(args) -> int:
    from .market import rollout
    config = _config(args)
    traj = rollout(_profile_for(args, config), config, seed=args.seed)
    path = _out(args) / "trajectory.csv"
    traj.to_csv(path)
    print(f"utilities: {' '.join(f'{u:.6f}' for u in traj.utilities)}")
    print(f"wrote {path}")
    return OK


def cmd_solve(args) -> int:
    from .analytic import LinearFeedbackEquilibrium, analytic_equilibrium, check_second_order
    from .market import rollout
    from .profiles import save_profile
    config = _config(args)
    if config.dropouts_enabled:
        print("note: solving the no-dropout game; analytic equilibria exist only there", file=sys.stderr)
    nodrop = config.replace(dropouts=False)
    eq = analytic_equilibrium(nodrop)
    out = _out(args)
    traj = rollout(eq.profile(), nodrop)
    traj.to_csv(out / "equilibrium.csv")
    save_profile(out / "profile.npz", eq, nodrop)
    if isinstance(eq, LinearFeedbackEquilibrium):
        with open(out / "coefficients.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "agent", "lambda1", "lambda2"])
            for t in range(config.horizon):
                for i in range(config.n_agents):
                    w.writerow([t + 1, i, repr(float(eq.lambda1[t, i])), repr(float(eq.lambda2[t, i]))])
        kind = "feedback"
    else:
        kind = "open-loop"
        rep = check_second_order(nodrop, eq.prices)
        print(f"second order: {'ok' if rep.passed else 'FAILED'} "
              f"(max eigenvalue {max(float(np.max(e)) for e in rep.eigenvalues):.6f})")
    print(f"{kind} equilibrium, prices by agent:")
    for i in range(config.n_agents):
        print(f"agent {i}: " + " ".join(f"{p:.6f}" for p in traj.prices[:, i]))
    print(f"wrote {out}")
    return OK


def cmd_train(args) -> int:
    from .learn import TrainConfig, train_selfplay
    from .profiles import save_profile, write_training_log
    config = _config(args)
    tc = TrainConfig(algo=args.algo, seed=args.seed, iterations=args.iterations,
                     trajectories_per_iteration=args.trajectories, threads=args.threads)
    every = max(1, args.iterations // 20)

    def progress(it, u):
        if it % every == 0 or it == tc.iterations - 1:
            print(f"iter {it:5d}  mean utilities {' '.join(f'{x:.5f}' for x in u)}", flush=True)

    learned = train_selfplay(config, args.algo, tc, progress=progress)
    out = _out(args)
    save_profile(out / "profile.npz", learned)
    write_training_log(out / "training_log.csv", learned.training_log)
    print(f"wrote {out / 'profile.npz'}")
    return OK


def cmd_verify(args) -> int:
    from .profiles import load_profile
    from .verify import verify_profile
    if not args.profile:
        raise UsageError("--profile is required")
    saved = load_profile(args.profile)
    config = _config(args) if args.config else saved.config
    t0 = time.perf_counter()
    report = verify_profile(saved.policies(), args.k, config, workers=args.workers)
    elapsed = time.perf_counter() - t0
    for a in report.agents:
        flag = " (small denominator)" if a.denominator_flag else ""
        print(f"agent {a.agent}: current {a.current_value:.6f}  best response {a.best_response_value:.6f}  "
              f"loss {a.loss:.6f}  normalized {a.normalized_loss:.6f}{flag}")
    print(f"epsilon {report.epsilon:.6g} at K={args.k} ({elapsed:.1f}s)")
    if args.out:
        out = _out(args)
        report.to_csv(out / "verification.csv")
        (out / "verification.json").write_text(report.to_json())
    return OK


def cmd_sweep(args) -> int:
    from .experiment import SweepSpec, emit_figures, load_spec, run_sweep
    spec = load_spec(args.spec) if args.spec else SweepSpec()
    overrides = {k: getattr(args, k) for k in ("iterations", "trajectories_per_iteration") if getattr(args, k)}
    if args.k != 32:
        overrides["k"] = args.k
    if overrides:
        from dataclasses import replace
        spec = replace(spec, **overrides)
    if args.thin:
        spec = spec.thinned(args.thin)

    def progress(row):
        status = row["regime"] if row["status"] == "ok" else f"FAILED {row['error']}"
        print(f"c0={row['c0']:.4f} {row['algo']} {row['information']} seed {row['seed']}: {status}", flush=True)

    out = _out(args)
    rows = run_sweep(spec, out, workers=args.workers, progress=progress)
    ok = [r for r in rows if r.get("status") == "ok"]
    if ok:
        emit_figures(ok, out / "figures")
    failed = len(rows) - len(ok)
    print(f"{len(ok)} cells ok, {failed} failed; results in {out / 'results.csv'}")
    return FAILED if failed else OK


def cmd_plot(args) -> int:
    from .experiment import emit_figures, plot_strategy, read_results
    if not args.results:
        raise UsageError("--results is required")
    out = _out(args)
    rows = [r for r in read_results(args.results) if r.get("status", "ok") == "ok"]
    for p in emit_figures(rows, out):
        print(f"wrote {p}")
    if args.cell:
        traj = Path(args.results).parent / "cells" / args.cell / "trajectory.csv"
        if not traj.exists():
            raise UsageError(f"no trajectory for cell {args.cell!r} at {traj}")
        path = plot_strategy(traj, out / f"strategy_{args.cell}.svg", title=args.cell)
        print(f"wrote {path}")
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynoligo", description="Dynamic oligopoly with exits: solve, learn, verify.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="market config (YAML)")
        sp.add_argument("--out", default=".", help="output directory")
        return sp

    sp = common(sub.add_parser("simulate", help="play a profile (default: analytic baseline) once"))
    sp.add_argument("--profile", help="profile file from train or solve-analytic")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("solve-analytic", help="no-dropout analytic equilibrium"))
    sp.set_defaults(func=cmd_solve)

    sp = common(sub.add_parser("train", help="self-play training"))
    sp.add_argument("--algo", choices=["ppo", "reinforce"], default="ppo")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--iterations", type=int, default=1000)
    sp.add_argument("--trajectories", type=int, default=20000)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("verify", help="brute-force best-response check"))
    sp.add_argument("--profile", help="profile file")
    sp.add_argument("--k", type=int, default=32, help="actions per stage on the grid")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_verify, out=None)

    sp = common(sub.add_parser("sweep", help="cost sweep"), config=False)
    sp.add_argument("--spec", help="sweep spec (YAML); defaults to the full grid")
    sp.add_argument("--thin", type=int, help="keep this many evenly spaced cost points")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--trajectories", dest="trajectories_per_iteration", type=int)
    sp.add_argument("--k", type=int, default=32)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = common(sub.add_parser("plot", help="figures from a results file"), config=False)
    sp.add_argument("--results", help="results.csv written by sweep")
    sp.add_argument("--cell", help="cell directory name for a strategy plot, e.g. c10_ppo_partial_s0")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return OK if e.code == 0 else INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        code = getattr(e, "code", "NOT_FOUND")
        print(f"error: {code}: {e}", file=sys.stderr)
        return INVALID
    except DynOligoError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return FAILED
    except (ValueError, OSError) as e:
        print(f"error: {type(e).__name__.upper()}: {e}", file=sys.stderr)
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
