"""Finite-horizon oligopoly with demand inertia and optional firm dropouts.

Firm ``i`` facing demand intercept ``D`` and charging ``p`` sells ``D - p`` units
at unit cost ``c_i``. After each stage, firms priced below the mean of the
active firms gain demand and those above it lose demand. With dropouts enabled,
a firm whose next-stage intercept falls below its cost leaves the market and
the area under its demand curve is split among the survivors.

All state arrays carry a trailing agent axis, so the same kernel
(:func:`transition`) serves single playthroughs and batches of them.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AllFirmsExit, ConfigError, PriceOutOfBounds


class Information(str, enum.Enum):
    FULL = "full"
    PARTIAL = "partial"


@dataclass(frozen=True)
class MarketConfig:
    n_agents: int
    horizon: int
    unit_costs: tuple
    initial_demands: tuple
    dropouts_enabled: bool = True
    information: Information = Information.PARTIAL
    p_max: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "unit_costs", tuple(float(c) for c in self.unit_costs))
        object.__setattr__(self, "initial_demands", tuple(float(d) for d in self.initial_demands))
        try:
            object.__setattr__(self, "information", Information(self.information))
        except ValueError:
            raise ConfigError(f"information must be 'full' or 'partial', got {self.information!r}") from None
        if self.p_max is not None:
            object.__setattr__(self, "p_max", float(self.p_max))
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if len(self.unit_costs) != self.n_agents or len(self.initial_demands) != self.n_agents:
            raise ConfigError("unit_costs and initial_demands need one entry per agent")
        cap = self.price_cap
        for i, c in enumerate(self.unit_costs):
            if not (0.0 <= c < cap):
                raise ConfigError(f"agent {i}: unit cost {c} must lie in [0, p_max={cap})")
        for i, d in enumerate(self.initial_demands):
            if not d >= 0.0:
                raise ConfigError(f"agent {i}: initial demand {d} must be >= 0")

    @property
    def demand_cap(self) -> float:
        """Largest intercept any firm can reach: all customer area in one firm."""
        return float(np.sqrt(np.sum(np.square(self.initial_demands))))

    @property
    def price_cap(self) -> float:
        # Default never clips the stage-wise monopoly price (D + c) / 2 for any reachable D.
        if self.p_max is not None:
            return self.p_max
        return (self.demand_cap + max(self.unit_costs)) / 2.0

    @property
    def costs(self) -> np.ndarray:
        return np.asarray(self.unit_costs, dtype=float)

    def replace(self, **changes) -> "MarketConfig":
        d = self.to_dict()
        d.update(changes)
        return MarketConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "horizon": self.horizon,
            "initial_demands": list(self.initial_demands),
            "unit_costs": list(self.unit_costs),
            "dropouts": self.dropouts_enabled,
            "information": self.information.value,
            "p_max": self.p_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketConfig":
        known = {"n_agents", "horizon", "initial_demands", "unit_costs", "dropouts", "information", "p_max"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            n = int(d["n_agents"])
            return cls(
                n_agents=n,
                horizon=int(d["horizon"]),
                unit_costs=tuple(d["unit_costs"]),
                initial_demands=tuple(d.get("initial_demands", [1.0] * n)),
                dropouts_enabled=bool(d.get("dropouts", True)),
                information=Information(d.get("information", "partial")),
                p_max=d.get("p_max"),
            )
        except KeyError as e:
            raise ConfigError(f"missing config key {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> MarketConfig:
    import yaml

    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return MarketConfig.from_dict(data)


def dump_config(config: MarketConfig, path) -> None:
    import yaml

    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


@dataclass(frozen=True)
class MarketState:
    t: int
    demands: np.ndarray
    active: np.ndarray

    @classmethod
    def initial(cls, config: MarketConfig) -> "MarketState":
        return cls(1, np.array(config.initial_demands, dtype=float), np.ones(config.n_agents, dtype=bool))


@dataclass(frozen=True)
class StageOutcome:
    prices: np.ndarray
    mean_price: float
    price_deltas: np.ndarray
    quantities: np.ndarray
    rewards: np.ndarray
    exits: frozenset


@dataclass
class Trajectory:
    outcomes: list
    states: list
    utilities: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.utilities is None:
            u = np.zeros(len(self.states[0].demands))
            for o in self.outcomes:
                u = u + o.rewards
            self.utilities = u

    @property
    def prices(self) -> np.ndarray:
        return np.array([o.prices for o in self.outcomes])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([o.rewards for o in self.outcomes])

    @property
    def demands(self) -> np.ndarray:
        """Intercepts faced in each played stage, shape (T, N)."""
        return np.array([s.demands for s in self.states[:-1]])

    @property
    def active(self) -> np.ndarray:
        return np.array([s.active for s in self.states[:-1]])

    def exit_stage(self) -> dict:
        """Map agent -> first stage it is absent from (2..T+1)."""
        out = {}
        for t, o in enumerate(self.outcomes, start=1):
            for i in o.exits:
                out.setdefault(i, t + 1)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["stage", "agent", "active", "demand", "price", "quantity", "reward", "exited_this_stage"])
            for t, (s, o) in enumerate(zip(self.states, self.outcomes), start=1):
                for i in range(len(s.demands)):
                    price = o.prices[i] if s.active[i] else ""
                    w.writerow([t, i, int(s.active[i]), repr(float(s.demands[i])),
                                price if price == "" else repr(float(price)),
                                repr(float(o.quantities[i])), repr(float(o.rewards[i])), int(i in o.exits)])


@dataclass(frozen=True)
class Observation:
    """What an agent sees. Fields may carry a leading batch axis."""

    t: int
    demands: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None

    def as_tuple(self) -> tuple:
        if self.demands is None:
            return (self.t,)
        return (self.t, *np.asarray(self.demands, dtype=float).tolist())


# policy(obs, rng) -> prices with the batch shape of obs (or a 1-element array)
Policy = Callable[..., np.ndarray]


def stage_reward(price, cost, demand):
    return (price - cost) * (demand - price)


@dataclass
class Transition:
    demands: np.ndarray
    active: np.ndarray
    mean_price: np.ndarray
    deltas: np.ndarray
    quantities: np.ndarray
    rewards: np.ndarray
    exits: np.ndarray
    wiped_out: np.ndarray


def transition(demands, prices, active, costs, dropouts: bool) -> Transition:
    """Vectorized stage update over arrays of shape (..., N).

    Prices of inactive agents are ignored. Rows in which every active firm
    would exit are flagged in ``wiped_out`` and become all-inactive.
    """
    demands = np.asarray(demands, dtype=float)
    active = np.asarray(active, dtype=bool)
    prices = np.where(active, prices, 0.0)
    n_active = active.sum(axis=-1)
    # mean shifted by a reference price: identical prices give exactly zero deltas
    ref = np.max(np.where(active, prices, -np.inf), axis=-1, initial=-np.inf)
    ref = np.where(n_active > 0, ref, 0.0)
    spread_sum = np.where(active, prices - ref[..., None], 0.0).sum(axis=-1)
    mean = np.where(n_active > 0, ref + spread_sum / np.maximum(n_active, 1), 0.0)
    deltas = np.where(active, prices - mean[..., None], 0.0)
    quantities = np.where(active, demands - prices, 0.0)
    rewards = np.where(active, stage_reward(prices, costs, demands), 0.0)
    tentative = np.where(active, demands - deltas, 0.0)
    if not dropouts:
        none = np.zeros_like(active)
        return Transition(tentative, active.copy(), mean, deltas, quantities, rewards, none,
                          np.zeros(n_active.shape, dtype=bool))
    leaving = active & (tentative < costs)
    survivors = active & ~leaving
    kept = np.where(survivors, tentative, 0.0)
    kept_total = kept.sum(axis=-1, keepdims=True)
    lost_area = np.where(leaving, tentative * tentative, 0.0).sum(axis=-1, keepdims=True)
    any_exit = leaving.any(axis=-1, keepdims=True)
    wiped = survivors.sum(axis=-1) == 0
    wiped &= n_active > 0
    # zero-demand survivors (possible only at zero cost) split the lost area evenly
    even = survivors / np.maximum(survivors.sum(axis=-1, keepdims=True), 1)
    share = np.where(kept_total > 0, kept / np.where(kept_total > 0, kept_total, 1.0), even)
    spread = np.sqrt(kept * kept + share * lost_area)
    new_demands = np.where(any_exit, np.where(survivors, spread, 0.0), tentative)
    return Transition(new_demands, survivors, mean, deltas, quantities, rewards, leaving, wiped)


def apply_dropouts(tentative_demands, costs, active):
    """Remove firms whose tentative intercept is below cost and spread their area.

    Returns ``(demands, new_exits)``. Raises :class:`AllFirmsExit` when no
    active firm survives.
    """
    tentative = np.asarray(tentative_demands, dtype=float)
    costs = np.asarray(costs, dtype=float)
    active = np.asarray(active, dtype=bool)
    leaving = active & (tentative < costs)
    survivors = active & ~leaving
    if active.any() and not survivors.any():
        raise AllFirmsExit("every active firm falls below its unit cost")
    if not leaving.any():
        return np.where(active, tentative, 0.0), frozenset()
    kept = np.where(survivors, tentative, 0.0)
    lost_area = np.sum(tentative[leaving] ** 2)
    share = kept / kept.sum() if kept.sum() > 0 else survivors / survivors.sum()
    demands = np.where(survivors, np.sqrt(kept ** 2 + share * lost_area), 0.0)
    return demands, frozenset(int(i) for i in np.flatnonzero(leaving))


def _check_prices(state: MarketState, prices, config: MarketConfig) -> np.ndarray:
    prices = np.array([np.nan if p is None else p for p in prices], dtype=float)
    if prices.shape != (config.n_agents,):
        raise ValueError(f"expected {config.n_agents} prices, got shape {prices.shape}")
    cap = config.price_cap
    for i in np.flatnonzero(state.active):
        if not (config.unit_costs[i] <= prices[i] <= cap):
            raise PriceOutOfBounds(int(i), prices[i], config.unit_costs[i], cap)
    return np.where(state.active, prices, 0.0)


def step(state: MarketState, prices, config: MarketConfig, allow_wipeout: bool = False):
    """Play one stage. Prices given for inactive agents are ignored.

    When every active firm would exit, raises :class:`AllFirmsExit` unless
    ``allow_wipeout``, in which case the market empties and later stages pay 0.
    """
    if not 1 <= state.t <= config.horizon:
        raise ValueError(f"stage {state.t} outside 1..{config.horizon}")
    p = _check_prices(state, prices, config)
    tr = transition(state.demands, p, state.active, config.costs, config.dropouts_enabled)
    if bool(tr.wiped_out) and not allow_wipeout:
        raise AllFirmsExit(f"stage {state.t}: every active firm falls below its unit cost")
    outcome = StageOutcome(
        prices=p,
        mean_price=float(tr.mean_price),
        price_deltas=tr.deltas,
        quantities=tr.quantities,
        rewards=tr.rewards,
        exits=frozenset(int(i) for i in np.flatnonzero(tr.exits)),
    )
    return MarketState(state.t + 1, tr.demands, tr.active), outcome


def observe(state: MarketState, config: MarketConfig, agent: int) -> Observation:
    if not 0 <= agent < config.n_agents:
        raise IndexError(f"agent {agent} out of range")
    if config.information is Information.PARTIAL:
        return Observation(state.t)
    return Observation(state.t, state.demands.copy(), state.active.copy())


def rollout(profile: Sequence[Policy], config: MarketConfig, seed=None, allow_wipeout: bool = False) -> Trajectory:
    if len(profile) != config.n_agents:
        raise ValueError(f"profile has {len(profile)} policies for {config.n_agents} agents")
    rng = np.random.default_rng(seed)
    state = MarketState.initial(config)
    states, outcomes = [state], []
    for _ in range(config.horizon):
        prices = [None] * config.n_agents
        for i in np.flatnonzero(state.active):
            obs = observe(state, config, int(i))
            batched = Observation(obs.t, None if obs.demands is None else obs.demands[None],
                                  None if obs.active is None else obs.active[None])
            prices[i] = float(np.asarray(profile[i](batched, rng)).reshape(-1)[0])
        state, outcome = step(state, prices, config, allow_wipeout)
        states.append(state)
        outcomes.append(outcome)
    return Trajectory(outcomes, states)
