"""Cost sweeps over the three-firm market: cells, resumable runs, figures.

A cell is one (c0, algorithm, information, seed) combination. Running a cell
trains a profile, verifies it, plays it once, and scores the play against the
matching no-dropout analytic equilibrium. Rows go to a single CSV whose first
line names the schema version; resuming skips every cell already recorded as
``ok``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .analytic import baseline_equilibrium
from .errors import ConfigError, MissingColumns
from .learn import TrainConfig, train_selfplay
from .market import MarketConfig, rollout
from .metrics import SEVERITY, Regime, aggregate_regime, classify_regime, predation_records, welfare_difference
from .profiles import save_profile, write_training_log
from .verify import verify_profile

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEMA_LINE = f"# dynoligo-results v{SCHEMA_VERSION}"
METRIC_COLUMNS = ["c0", "algo", "information", "seed", "regime", "PI_0", "PI_1", "PI_2", "PS", "CS", "W",
                  "dPS", "dCS", "dW", "epsilon", "loss_agent0", "loss_agents12"]
# bookkeeping columns follow the metrics so the metric prefix never moves
COLUMNS = METRIC_COLUMNS + ["c0_index", "cell_key", "status", "error"]
_FLOATS = {"c0", "PI_0", "PI_1", "PI_2", "PS", "CS", "W", "dPS", "dCS", "dW", "epsilon", "loss_agent0",
           "loss_agents12"}
_INTS = {"seed", "c0_index"}

REGIME_COLORS = {
    Regime.DOMINANCE: "#7b3294",
    Regime.PREDATION: "#d7191c",
    Regime.COMPETITION: "#1a9641",
    Regime.MARGINALIZATION: "#2c7bb6",
    Regime.OTHER: "#bababa",
}


@dataclass(frozen=True)
class SweepSpec:
    c0_low: float = 0.42
    c0_high: float = 0.95
    c0_points: int = 60
    c0_indices: Optional[tuple] = None  # subset of grid indices; None keeps all
    rival_cost: float = 0.8
    seeds: tuple = (0, 1, 2, 3, 4)
    algorithms: tuple = ("ppo", "reinforce")
    information: tuple = ("full", "partial")
    n_agents: int = 3
    horizon: int = 4
    initial_demand: float = 1.0
    dropouts: bool = True
    k: int = 32
    iterations: int = 1000
    trajectories_per_iteration: int = 20000
    base_seed: int = 0

    def __post_init__(self):
        if self.c0_points < 2 or not self.c0_low < self.c0_high:
            raise ConfigError("cost grid needs at least two increasing points")
        if self.c0_indices is not None:
            object.__setattr__(self, "c0_indices", tuple(int(i) for i in self.c0_indices))
            if any(not 0 <= i < self.c0_points for i in self.c0_indices):
                raise ConfigError("c0_indices outside the grid")
        for name in ("seeds", "algorithms", "information"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (self.seeds and self.algorithms and self.information):
            raise ConfigError("seeds, algorithms and information must be non-empty")
        if not set(self.algorithms) <= {"ppo", "reinforce"}:
            raise ConfigError(f"unknown algorithms in {self.algorithms}")
        if not set(self.information) <= {"full", "partial"}:
            raise ConfigError(f"unknown information settings in {self.information}")

    @property
    def c0_grid(self) -> np.ndarray:
        return np.linspace(self.c0_low, self.c0_high, self.c0_points)

    def thinned(self, points: int = 6) -> "SweepSpec":
        idx = np.round(np.linspace(0, self.c0_points - 1, points)).astype(int)
        return replace(self, c0_indices=tuple(idx.tolist()))

    def cells(self) -> list:
        grid = self.c0_grid
        idx = self.c0_indices if self.c0_indices is not None else range(self.c0_points)
        return [Cell(self, i, float(grid[i]), algo, info, s)
                for i in idx for algo in self.algorithms for info in self.information for s in self.seeds]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**d)


def load_spec(path) -> SweepSpec:
    with open(path) as fh:
        return SweepSpec.from_dict(yaml.safe_load(fh) or {})


@dataclass(frozen=True)
class Cell:
    spec: SweepSpec = field(repr=False)
    c0_index: int
    c0: float
    algo: str
    information: str
    seed_index: int

    def config(self) -> MarketConfig:
        s = self.spec
        costs = (self.c0,) + (s.rival_cost,) * (s.n_agents - 1)
        return MarketConfig(s.n_agents, s.horizon, costs, (s.initial_demand,) * s.n_agents, s.dropouts,
                            self.information)

    @property
    def seed(self) -> int:
        """Derived training seed; uncorrelated across cells, stable across runs."""
        text = f"{self.spec.base_seed}|{self.c0_index}|{self.algo}|{self.information}|{self.seed_index}"
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF

    @property
    def key(self) -> str:
        s = self.spec
        text = "|".join(map(str, (self.config().config_hash(), self.algo, self.seed, s.iterations,
                                  s.trajectories_per_iteration, s.k)))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def name(self) -> str:
        return f"c{self.c0_index:02d}_{self.algo}_{self.information}_s{self.seed_index}"

    def train_config(self) -> TrainConfig:
        return TrainConfig(algo=self.algo, iterations=self.spec.iterations,
                           trajectories_per_iteration=self.spec.trajectories_per_iteration, seed=self.seed)


def evaluate_profile(profile, config: MarketConfig, k: int) -> dict:
    """Metrics of one deterministic profile; the keys are the metric columns minus the cell labels."""
    traj = rollout(profile, config)
    baseline = rollout(baseline_equilibrium(config), config.replace(dropouts=False))
    pis = [r.PI for r in predation_records(traj, baseline)]
    welfare = welfare_difference(traj, baseline)
    report = verify_profile(profile, k, config)
    losses = report.losses
    row = {"regime": classify_regime(traj).value}
    row.update({f"PI_{i}": pis[i] if i < len(pis) else 0.0 for i in range(3)})
    row.update(PS=welfare.PS, CS=welfare.CS, W=welfare.W, dPS=welfare.dPS, dCS=welfare.dCS, dW=welfare.dW,
               epsilon=report.epsilon, loss_agent0=float(losses[0]),
               loss_agents12=float(np.max(losses[1:])) if len(losses) > 1 else 0.0)
    return {"row": row, "trajectory": traj, "report": report}


@dataclass
class StudyRun:
    c0: float
    seed: int
    regime: Regime
    exit_stages: dict  # agent -> first absent stage
    PI: list
    losses: list
    prices: np.ndarray

    def rival_exit_by(self, stage: int, focal: int = 0) -> bool:
        return any(s <= stage for a, s in self.exit_stages.items() if a != focal)


def study_regimes(costs, algo: str = "ppo", information: str = "partial", seeds=range(5),
                  iterations: int = 200, trajectories: int = 2000, k: int = 32, rival_cost: float = 0.8,
                  progress: Optional[Callable] = None) -> list:
    """Train and score one profile per (c0, seed) with plain integer seeds."""
    runs = []
    for c0 in costs:
        config = MarketConfig(3, 4, (c0, rival_cost, rival_cost), (1.0,) * 3, True, information)
        for seed in seeds:
            tc = TrainConfig(algo=algo, iterations=iterations, trajectories_per_iteration=trajectories, seed=seed)
            learned = train_selfplay(config, algo, tc)
            res = evaluate_profile(learned.policies(), config, k)
            traj = res["trajectory"]
            run = StudyRun(float(c0), int(seed), Regime(res["row"]["regime"]), traj.exit_stage(),
                           [res["row"][f"PI_{i}"] for i in range(3)], res["report"].losses.tolist(), traj.prices)
            runs.append(run)
            if progress:
                progress(run)
    return runs


def run_cell(cell: Cell, out_dir=None) -> dict:
    """Train, verify and score one cell; never raises, failures become rows."""
    row = {"c0": cell.c0, "algo": cell.algo, "information": cell.information, "seed": cell.seed_index,
           "c0_index": cell.c0_index, "cell_key": ""}
    try:
        row["cell_key"] = cell.key
        config = cell.config()
        learned = train_selfplay(config, cell.algo, cell.train_config())
        result = evaluate_profile(learned.policies(), config, cell.spec.k)
        row.update(result["row"], status="ok", error="")
        if out_dir is not None:
            cell_dir = Path(out_dir) / "cells" / cell.name
            cell_dir.mkdir(parents=True, exist_ok=True)
            result["trajectory"].to_csv(cell_dir / "trajectory.csv")
            save_profile(cell_dir / "profile.npz", learned, cell_key=cell.key)
            write_training_log(cell_dir / "training_log.csv", learned.training_log)
    except Exception as exc:  # a failed cell must not stop the sweep
        log.warning("cell %s failed: %s", cell.name, exc)
        code = getattr(exc, "code", type(exc).__name__)
        row.update(status="failed", error=f"{code}: {exc}".replace("\n", " "))
        log.debug("%s", traceback.format_exc())
    return row


def _format(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def read_results(path) -> list:
    """Rows of a results file; when a cell appears twice the later row wins."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# dynoligo-results"):
            fh.seek(0)
        rows = list(csv.DictReader(fh))
    latest = {}
    for r in rows:
        for k in list(r):
            if r[k] in ("", None):
                continue
            if k in _FLOATS:
                r[k] = float(r[k])
            elif k in _INTS:
                r[k] = int(r[k])
        latest[r.get("cell_key") or len(latest)] = r
    return list(latest.values())


def _append(path: Path, row: dict) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(SCHEMA_LINE + "\n")
        w = csv.DictWriter(fh, fieldnames=COLUMNS, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow({k: _format(row.get(k)) for k in COLUMNS})
        fh.flush()
        os.fsync(fh.fileno())


def run_sweep(spec: SweepSpec, out_dir, workers: int = 1, cell_fn: Callable = run_cell,
              progress: Optional[Callable] = None) -> list:
    """Run every cell not yet recorded as ``ok`` in ``out_dir/results.csv``; returns all rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.csv"
    done = set()
    if results.exists():
        done = {r["cell_key"] for r in read_results(results) if r.get("status") == "ok"}
    todo = [c for c in spec.cells() if c.key not in done]
    log.info("%d cells, %d already done", len(todo) + len(done), len(done))
    if workers <= 1:
        for cell in todo:
            row = cell_fn(cell, out)
            _append(results, row)
            if progress:
                progress(row)
    else:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            futures = [pool.submit(cell_fn, cell, out) for cell in todo]
            for fut in as_completed(futures):
                row = fut.result()
                _append(results, row)
                if progress:
                    progress(row)
    keys = {c.key for c in spec.cells()}
    return sort_rows([r for r in read_results(results) if r.get("cell_key") in keys])


def sort_rows(rows: list) -> list:
    return sorted(rows, key=lambda r: (r["algo"], r["information"], r["c0"], r["seed"]))


# ---------------------------------------------------------------- figures

def _require(rows, columns):
    if not rows:
        raise MissingColumns("results table is empty")
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise MissingColumns(f"results lack columns: {', '.join(missing)}")


def summarize(rows: list, column: str):
    """c0 values with mean and population std of ``column`` over seeds (ok rows only)."""
    groups = {}
    for r in rows:
        if r.get("status", "ok") == "ok":
            groups.setdefault(float(r["c0"]), []).append(float(r[column]))
    c0 = np.array(sorted(groups))
    vals = [np.asarray(groups[c]) for c in c0]
    return c0, np.array([v.mean() for v in vals]), np.array([v.std() for v in vals])


def regimes_by_cost(rows: list) -> dict:
    groups = {}
    for r in rows:
        if r.get("status", "ok") == "ok":
            groups.setdefault(float(r["c0"]), []).append(r["regime"])
    return {c: aggregate_regime(v) for c, v in sorted(groups.items())}


def _regime_bar(ax, regimes: dict):
    costs = np.array(list(regimes))
    if len(costs) > 1:
        mids = (costs[1:] + costs[:-1]) / 2
        edges = np.concatenate([[costs[0] - (mids[0] - costs[0])], mids, [costs[-1] + (costs[-1] - mids[-1])]])
    else:
        edges = np.array([costs[0] - 0.005, costs[0] + 0.005])
    for (lo, hi), reg in zip(zip(edges[:-1], edges[1:]), regimes.values()):
        ax.axvspan(lo, hi, color=REGIME_COLORS[reg], lw=0)
    ax.set_yticks([])
    ax.set_xlim(edges[0], edges[-1])


def _legend_handles():
    from matplotlib.patches import Patch
    return [Patch(color=REGIME_COLORS[r], label=r.value) for r in SEVERITY]


def _panel_figure(rows, columns, titles, ylabel, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, len(columns), figsize=(4.2 * len(columns), 3.8), sharex="col",
                             gridspec_kw={"height_ratios": [8, 1]}, squeeze=False)
    regimes = regimes_by_cost(rows)
    for j, (col, title) in enumerate(zip(columns, titles)):
        c0, mean, std = summarize(rows, col)
        ax = axes[0, j]
        ax.plot(c0, mean, lw=2, color="black")
        ax.fill_between(c0, mean - std, mean + std, alpha=0.3, color="tab:blue")
        ax.axhline(0.0, lw=0.5, color="grey")
        ax.set_title(title)
        if j == 0:
            ax.set_ylabel(ylabel)
        _regime_bar(axes[1, j], regimes)
        axes[1, j].set_xlabel("$c_0$")
    fig.legend(handles=_legend_handles(), loc="lower center", ncol=len(SEVERITY), frameon=False)
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def emit_figures(rows: list, out_dir) -> list:
    """One PI figure and one welfare figure per (algorithm, information) slice, as SVG."""
    _require(rows, METRIC_COLUMNS)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    slices = sorted({(r["algo"], r["information"]) for r in rows})
    for algo, info in slices:
        part = [r for r in rows if r["algo"] == algo and r["information"] == info]
        if not any(r.get("status", "ok") == "ok" for r in part):
            continue
        paths.append(_panel_figure(part, ["PI_0", "PI_1", "PI_2"], ["Agent 0", "Agent 1", "Agent 2"],
                                   "predatory incentive", out / f"pi_{algo}_{info}.svg"))
        paths.append(_panel_figure(part, ["dPS", "dCS", "dW"], ["producer surplus", "consumer surplus", "welfare"],
                                   "difference to no-dropout equilibrium", out / f"welfare_{algo}_{info}.svg"))
    return paths


def strategy_series(rows: list) -> dict:
    """agent -> [(stage, price)] over the stages the agent played."""
    need = {"stage", "agent", "active", "price"}
    if not rows or not need <= set(rows[0]):
        raise MissingColumns(f"trajectory needs columns {sorted(need)}")
    series = {}
    for r in rows:
        if str(r["active"]) in ("1", "True", "true"):
            series.setdefault(int(r["agent"]), []).append((int(r["stage"]), float(r["price"])))
    return series


def plot_strategy(trajectory_csv, path, title: str = "") -> Path:
    """Prices per agent over rounds; a line stops at the last round its agent played."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(trajectory_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    series = strategy_series(rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for agent, pts in sorted(series.items()):
        t, p = zip(*pts)
        ax.plot(t, p, marker="o", label=f"agent {agent}")
    ax.set_xlabel("round")
    ax.set_ylabel("price")
    ax.set_xticks(sorted({int(r["stage"]) for r in rows}))
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def regime_order_is_monotone(regimes: dict) -> bool:
    """True when regimes along increasing c0 never move back toward dominance."""
    rank = {Regime.DOMINANCE: 0, Regime.PREDATION: 1, Regime.COMPETITION: 2, Regime.MARGINALIZATION: 3}
    seq = [rank[r] for r in regimes.values() if r in rank]
    return all(a <= b for a, b in zip(seq, seq[1:]))
