"""Brute-force best responses against fixed opponent policies.

Against deterministic opponents the history reached at stage ``t`` is a
function of the deviator's own earlier prices, so every deviation strategy on
a K-point price grid corresponds to one root-to-leaf path in a depth-T tree
with branching K. The tree is expanded one stage at a time as numpy arrays,
separately for each first-stage price, and reduced by ``max``.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import OpponentStochastic
from .market import Information, MarketConfig, Observation, transition


def action_grid(agent: int, K: int, config: MarketConfig) -> np.ndarray:
    if K < 2:
        raise ValueError("K must be >= 2")
    return np.linspace(config.unit_costs[agent], config.price_cap, K)


def node_count(K: int, T: int) -> int:
    return sum(K ** t for t in range(1, T + 1))


def _is_deterministic(policy) -> bool:
    return getattr(policy, "deterministic", True)


def _opponent_prices(profile, agent, t, demands, active, config, rng):
    """Prices of every agent but ``agent`` for a batch of states (column ``agent`` left 0)."""
    B, N = demands.shape
    prices = np.zeros((B, N))
    full = config.information is Information.FULL
    for j in range(N):
        if j == agent or not active[:, j].any():
            continue
        obs = Observation(t, demands, active) if full else Observation(t)
        p = np.asarray(profile[j](obs, rng), dtype=float).reshape(-1)
        prices[:, j] = np.broadcast_to(p, (B,)) if p.size == 1 else p
    return prices


def play(profile: Sequence, config: MarketConfig, samples: int = 1, rng=None):
    """Batched playthrough; returns per-stage arrays ``(prices, demands, active, rewards)``.

    Rows in which every firm would exit end with all firms inactive and zero
    rewards instead of raising.
    """
    rng = np.random.default_rng(rng)
    N, T = config.n_agents, config.horizon
    demands = np.tile(np.asarray(config.initial_demands, dtype=float), (samples, 1))
    active = np.ones((samples, N), dtype=bool)
    full = config.information is Information.FULL
    out_p, out_d, out_a, out_r = [], [], [], []
    for t in range(1, T + 1):
        prices = np.zeros((samples, N))
        for j in range(N):
            obs = Observation(t, demands, active) if full else Observation(t)
            p = np.asarray(profile[j](obs, rng), dtype=float).reshape(-1)
            prices[:, j] = np.broadcast_to(p, (samples,)) if p.size == 1 else p
        tr = transition(demands, prices, active, config.costs, config.dropouts_enabled)
        out_p.append(np.where(active, prices, 0.0))
        out_d.append(demands)
        out_a.append(active)
        out_r.append(tr.rewards)
        demands, active = tr.demands, tr.active
    stack = lambda xs: np.stack(xs, axis=1)  # noqa: E731
    return stack(out_p), stack(out_d), stack(out_a), stack(out_r)


def current_value(profile, agent: int, config: MarketConfig, samples: int = 1, rng=None) -> float:
    rewards = play(profile, config, samples, rng)[3]
    return float(rewards[:, :, agent].sum(axis=1).mean())


@dataclass
class BestResponse:
    value: float
    actions: np.ndarray  # best deviation path, one price per stage
    nodes: int


def _subtree(profile, agent, config, grid, first, samples, seed):
    """Best (mean) utility over all continuations after first-stage price ``grid[first]``."""
    rng = np.random.default_rng(seed)
    N, T, K = config.n_agents, config.horizon, len(grid)
    costs = config.costs
    demands = np.tile(np.asarray(config.initial_demands, dtype=float), (samples, 1))
    active = np.ones((samples, N), dtype=bool)
    cum = np.zeros(samples)
    n_prefix = 1
    for t in range(1, T + 1):
        prices = _opponent_prices(profile, agent, t, demands, active, config, rng)
        if t == 1:
            prices[:, agent] = grid[first]
        else:
            # rows are (prefix, sample); expand to (prefix, own price, sample)
            S = samples
            prices = np.repeat(prices.reshape(n_prefix, 1, S, N), K, axis=1)
            prices[:, :, :, agent] = grid[None, :, None]
            prices = prices.reshape(-1, N)
            demands = np.repeat(demands.reshape(n_prefix, 1, S, N), K, axis=1).reshape(-1, N)
            active = np.repeat(active.reshape(n_prefix, 1, S, N), K, axis=1).reshape(-1, N)
            cum = np.repeat(cum.reshape(n_prefix, 1, S), K, axis=1).reshape(-1)
            n_prefix *= K
        tr = transition(demands, prices, active, costs, config.dropouts_enabled)
        cum = cum + tr.rewards[:, agent]
        demands, active = tr.demands, tr.active
    values = cum.reshape(n_prefix, samples).mean(axis=1)
    best = int(np.argmax(values))
    path = [first]
    digits = []
    for _ in range(T - 1):
        digits.append(best % K)
        best //= K
    path += digits[::-1]
    return float(values.max()), np.array(path)


def best_response(profile: Sequence, agent: int, K: int, config: MarketConfig,
                  samples: Optional[int] = None, workers: int = 1, seed: int = 0) -> BestResponse:
    """Exact best response of ``agent`` over its K-point price grid.

    Stochastic opponents need ``samples`` (Monte Carlo draws per node); the
    deviation is then restricted to stage-indexed price paths and scored by
    the sample mean with common random numbers across paths.
    """
    stochastic = any(not _is_deterministic(p) for j, p in enumerate(profile) if j != agent)
    if stochastic and samples is None:
        raise OpponentStochastic("stochastic opponent policies need a Monte Carlo sample count")
    samples = samples if stochastic else 1
    grid = action_grid(agent, K, config)

    def run(a):
        return _subtree(profile, agent, config, grid, a, samples, seed)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, range(K)))
    else:
        results = [run(a) for a in range(K)]
    values = [v for v, _ in results]
    a = int(np.argmax(values))
    return BestResponse(values[a], grid[results[a][1]], node_count(K, config.horizon))


def best_response_value(profile, agent, K, config, samples=None, workers=1) -> float:
    return best_response(profile, agent, K, config, samples, workers).value


@dataclass
class AgentVerification:
    agent: int
    best_response_value: float
    current_value: float
    loss: float
    normalized_loss: float
    denominator_flag: bool
    best_response_path: list = field(default_factory=list)


@dataclass
class VerificationReport:
    K: int
    agents: list
    nodes_per_agent: int

    @property
    def epsilon(self) -> float:
        return max(a.loss for a in self.agents)

    @property
    def losses(self) -> np.ndarray:
        return np.array([a.loss for a in self.agents])

    def summary(self) -> dict:
        return {
            "K": self.K,
            "epsilon": self.epsilon,
            "nodes_per_agent": self.nodes_per_agent,
            "agents": [asdict(a) for a in self.agents],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["agent", "K", "current_value", "br_value", "loss", "normalized_loss", "denominator_flag"])
            for a in self.agents:
                w.writerow([a.agent, self.K, repr(a.current_value), repr(a.best_response_value),
                            repr(a.loss), repr(a.normalized_loss), int(a.denominator_flag)])


def verify_profile(profile: Sequence, K: int, config: MarketConfig, samples: Optional[int] = None,
                   workers: int = 1, small_denominator: float = 0.01) -> VerificationReport:
    """Brute-force utility loss of every agent.

    The loss is clamped at 0: the candidate's own prices may lie off the grid
    and beat every grid path, so the figure bounds the gain from deviating
    within the grid.
    """
    agents = []
    for i in range(config.n_agents):
        br = best_response(profile, i, K, config, samples, workers)
        stochastic = not all(_is_deterministic(p) for p in profile)
        cur = current_value(profile, i, config, samples if stochastic and samples else 1)
        loss = max(br.value - cur, 0.0)
        norm = loss / br.value if br.value > 0 else (0.0 if loss == 0 else float("inf"))
        agents.append(AgentVerification(i, br.value, cur, loss, norm, br.value < small_denominator,
                                        br.actions.tolist()))
    return VerificationReport(K, agents, node_count(K, config.horizon))
