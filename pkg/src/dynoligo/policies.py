"""Deterministic pricing policies used as equilibrium candidates and deviations."""

from __future__ import annotations

import numpy as np

from .market import MarketConfig, Observation


class OpenLoopPolicy:
    """Price depends on the stage only: ``prices[t - 1]``."""

    deterministic = True
    kind = "open_loop"

    def __init__(self, agent: int, prices):
        self.agent = agent
        self.prices = np.asarray(prices, dtype=float)

    def __call__(self, obs: Observation, rng=None) -> np.ndarray:
        p = self.prices[obs.t - 1]
        if obs.demands is None:
            return np.array([p])
        return np.full(np.shape(obs.demands)[:-1], p)


class LinearFeedbackPolicy:
    """``p = lambda1[t] + lambda2[t] * D_own``, clipped to the action interval.

    Clipping only matters off the equilibrium path, where a deviating rival can
    push a firm's intercept far enough that the affine rule leaves ``[c_i, p_max]``.
    """

    deterministic = True
    kind = "linear_feedback"

    def __init__(self, agent: int, lambda1, lambda2, config: MarketConfig):
        self.agent = agent
        self.lambda1 = np.asarray(lambda1, dtype=float)
        self.lambda2 = np.asarray(lambda2, dtype=float)
        self.low = config.unit_costs[agent]
        self.high = config.price_cap

    def __call__(self, obs: Observation, rng=None) -> np.ndarray:
        if obs.demands is None:
            raise ValueError("feedback policy needs demand observations")
        d = np.asarray(obs.demands)[..., self.agent]
        p = self.lambda1[obs.t - 1] + self.lambda2[obs.t - 1] * d
        return np.clip(p, self.low, self.high)


def open_loop_profile(prices) -> list:
    """One :class:`OpenLoopPolicy` per column of a (T, N) price matrix."""
    prices = np.asarray(prices, dtype=float)
    return [OpenLoopPolicy(i, prices[:, i]) for i in range(prices.shape[1])]
