"""Analytical equilibria of the game without dropouts.

Two settings have closed characterizations:

* stage-only observations: each firm commits to a price sequence. Equilibria
  are the solutions of the first-order system solved by :func:`solve_open_loop_ne`.
* full observations: prices affine in the firm's own intercept,
  ``p = lambda1[t] + lambda2[t] * D``, obtained by backward induction in
  :func:`solve_feedback_ne`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintViolated, NoConvergence, SingularStageSystem
from .market import MarketConfig
from .policies import LinearFeedbackPolicy, OpenLoopPolicy


@dataclass
class OpenLoopEquilibrium:
    prices: np.ndarray  # (T, N)
    demands: np.ndarray  # (T, N)
    residual_norm: float
    iterations: int = 0

    def profile(self) -> list:
        return [OpenLoopPolicy(i, self.prices[:, i]) for i in range(self.prices.shape[1])]


@dataclass
class LinearFeedbackEquilibrium:
    lambda1: np.ndarray  # (T, N)
    lambda2: np.ndarray  # (T, N)
    config: MarketConfig = field(repr=False)

    def profile(self) -> list:
        return [LinearFeedbackPolicy(i, self.lambda1[:, i], self.lambda2[:, i], self.config)
                for i in range(self.config.n_agents)]


@dataclass
class SecondOrderReport:
    eigenvalues: list  # per agent, sorted ascending
    hessians: list

    @property
    def passed(self) -> bool:
        return all(np.all(ev < 0) for ev in self.eigenvalues)


def demand_path(prices, config: MarketConfig) -> np.ndarray:
    """Intercepts faced at stages 1..T when nobody drops out."""
    prices = np.asarray(prices, dtype=float)
    T, N = prices.shape
    d = np.empty((T, N))
    d[0] = config.initial_demands
    for t in range(T - 1):
        d[t + 1] = d[t] - prices[t] + prices[t].mean()
    return d


def open_loop_utilities(prices, config: MarketConfig) -> np.ndarray:
    """Undiscounted utilities of a (T, N) price matrix without dropouts or bound checks."""
    prices = np.asarray(prices, dtype=float)
    d = demand_path(prices, config)
    return ((prices - config.costs) * (d - prices)).sum(axis=0)


def foc_residuals(prices, config: MarketConfig) -> np.ndarray:
    """Stationarity residuals of each firm's utility in its own price sequence.

    Entry ``(t, i)`` (flattened row-major) is
    ``D_t - 2 p_t + c - (N-1)/N * sum_{tau > t} (p_tau - c)``.
    """
    prices = np.asarray(prices, dtype=float).reshape(config.horizon, config.n_agents)
    c = config.costs
    k = (config.n_agents - 1) / config.n_agents
    d = demand_path(prices, config)
    margin = prices - c
    # sum over strictly later stages
    later = np.cumsum(margin[::-1], axis=0)[::-1] - margin
    return (d - 2 * prices + c - k * later).ravel()


def _foc_jacobian(T: int, N: int) -> np.ndarray:
    k = (N - 1) / N
    eye = np.eye(N)
    J = np.zeros((T, N, T, N))
    for t in range(T):
        for u in range(T):
            if u < t:
                J[t, :, u, :] += 1.0 / N - eye
            if u == t:
                J[t, :, u, :] -= 2 * eye
            if u > t:
                J[t, :, u, :] -= k * eye
    return J.reshape(T * N, T * N)


def _check_box(prices, demands, config: MarketConfig, tol=1e-12):
    c = config.costs
    bad = []
    if np.any(prices < c - tol):
        t, i = np.argwhere(prices < c - tol)[0]
        bad.append(f"price below cost at stage {t + 1}, agent {i}")
    if np.any(prices > config.price_cap + tol):
        t, i = np.argwhere(prices > config.price_cap + tol)[0]
        bad.append(f"price above p_max at stage {t + 1}, agent {i}")
    if np.any(demands < -tol):
        t, i = np.argwhere(demands < -tol)[0]
        bad.append(f"negative demand at stage {t + 1}, agent {i}")
    return bad


def _newton(config: MarketConfig, p0, tol, max_iter):
    T, N = config.horizon, config.n_agents
    J = _foc_jacobian(T, N)
    p = np.asarray(p0, dtype=float).ravel().copy()
    r = foc_residuals(p, config)
    it = 0
    while np.max(np.abs(r)) > tol:
        if it >= max_iter:
            raise NoConvergence(it, float(np.max(np.abs(r))))
        p = p - np.linalg.solve(J, r)
        r = foc_residuals(p, config)
        it += 1
    return p.reshape(T, N), float(np.max(np.abs(r))), it


def solve_open_loop_ne(config: MarketConfig, tol=1e-10, max_iter=50, check_constraints=True) -> OpenLoopEquilibrium:
    """Newton solve of the stationarity system from the stage-wise monopoly guess."""
    guess = np.tile((np.asarray(config.initial_demands) + config.costs) / 2, (config.horizon, 1))
    prices, res, it = _newton(config, guess, tol, max_iter)
    eq = OpenLoopEquilibrium(prices, demand_path(prices, config), res, it)
    if check_constraints:
        bad = _check_box(eq.prices, eq.demands, config)
        if bad:
            raise ConstraintViolated("; ".join(bad), eq)
    return eq


def open_loop_solutions(config: MarketConfig, starts=16, seed=0, tol=1e-10) -> list:
    """Distinct Newton solutions from the default guess plus random feasible starts."""
    rng = np.random.default_rng(seed)
    T, N = config.horizon, config.n_agents
    found = [solve_open_loop_ne(config, tol, check_constraints=False).prices]
    for _ in range(starts):
        p0 = rng.uniform(config.costs, config.price_cap, size=(T, N))
        p, _, _ = _newton(config, p0, tol, 50)
        if all(np.max(np.abs(p - q)) > 1e-6 for q in found):
            found.append(p)
    return found


def check_second_order(config: MarketConfig, prices, h=1e-5) -> SecondOrderReport:
    """Central-difference Hessian of each firm's utility in its own price sequence."""
    prices = np.asarray(prices, dtype=float)
    T, N = prices.shape
    eigs, hessians = [], []
    for i in range(N):
        def u(delta):
            p = prices.copy()
            p[:, i] += delta
            return open_loop_utilities(p, config)[i]

        H = np.empty((T, T))
        for a in range(T):
            for b in range(a, T):
                ea = np.zeros(T)
                eb = np.zeros(T)
                ea[a] = h
                eb[b] = h
                H[a, b] = H[b, a] = (u(ea + eb) - u(ea - eb) - u(-ea + eb) + u(-ea - eb)) / (4 * h * h)
        hessians.append(H)
        eigs.append(np.sort(np.linalg.eigvalsh(H)))
    return SecondOrderReport(eigs, hessians)


def solve_feedback_ne(config: MarketConfig) -> LinearFeedbackEquilibrium:
    """Backward induction for the affine-in-own-demand equilibrium.

    Without dropouts the mean intercept never changes, so once every rival
    uses the same demand slope the rivals' summed price is affine in the
    firm's own intercept. Each firm's continuation value is then a quadratic
    ``alpha + beta * D + gamma / 2 * D**2`` in its own intercept alone.
    """
    T, N = config.horizon, config.n_agents
    c = config.costs
    k = (N - 1) / N
    d_mean = float(np.mean(config.initial_demands))
    lam1 = np.empty((T, N))
    lam2 = np.empty((T, N))
    alpha = np.zeros(N)
    beta = np.zeros(N)
    gamma = 0.0
    for t in reversed(range(T)):
        curv = 2.0 - k * k * gamma
        denom = curv - k * gamma / N
        if curv <= 0 or abs(denom) < 1e-14:
            raise SingularStageSystem(f"stage {t + 1}: stage objective not strictly concave")
        b = (1.0 - k * gamma) / denom
        # a_i * curv + (k gamma / N) * sum_{j != i} a_j = c_i - k beta_i - k gamma b Dbar
        A = np.full((N, N), k * gamma / N)
        np.fill_diagonal(A, curv)
        rhs = c - k * beta - k * gamma * b * d_mean
        try:
            a = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            raise SingularStageSystem(f"stage {t + 1}: intercept system is singular") from None
        lam1[t] = a
        lam2[t] = b
        # next intercept: D' = u * D + w_i
        g = (a.sum() - a + b * N * d_mean) / N
        u = (1.0 - b / N) - k * b
        w = g - k * a
        e0, f0, f1 = a - c, -a, 1.0 - b
        alpha = e0 * f0 + alpha + beta * w + gamma * w * w / 2
        beta = e0 * f1 + b * f0 + beta * u + gamma * u * w
        gamma = 2 * b * f1 + gamma * u * u
    return LinearFeedbackEquilibrium(lam1, lam2, config)


def solve_open_loop_box_ne(config: MarketConfig, tol=1e-10, max_iter=100) -> OpenLoopEquilibrium:
    """Equilibrium price sequences when the lower price bound ``p >= c`` binds.

    Semismooth Newton (active-set form) on ``min(p - c, -dU/dp) = 0``. Each
    firm's utility is strictly concave in its own sequence, so a solution of
    these complementarity conditions is a Nash equilibrium of the bounded game.
    """
    T, N = config.horizon, config.n_agents
    J = _foc_jacobian(T, N)
    c = np.tile(config.costs, T)
    p = solve_open_loop_ne(config, tol, check_constraints=False).prices.ravel()
    at_bound = p < c
    for it in range(1, max_iter + 1):
        r0 = foc_residuals(np.zeros(T * N), config)
        A = J.copy()
        b = -r0
        A[at_bound] = 0.0
        A[at_bound, np.flatnonzero(at_bound)] = 1.0
        b[at_bound] = c[at_bound]
        p = np.linalg.solve(A, b)
        g = foc_residuals(p, config)
        nxt = (p - c) + g < 0
        if np.array_equal(nxt, at_bound):
            break
        at_bound = nxt
    else:
        raise NoConvergence(max_iter, float(np.max(np.abs(np.minimum(p - c, -foc_residuals(p, config))))))
    p = np.where(at_bound, c, p)
    res = float(np.max(np.abs(np.minimum(p - c, -foc_residuals(p, config)))))
    if res > tol:
        raise NoConvergence(it, res)
    prices = p.reshape(T, N)
    eq = OpenLoopEquilibrium(prices, demand_path(prices, config), res, it)
    bad = _check_box(eq.prices, eq.demands, config)
    if bad:
        raise ConstraintViolated("; ".join(bad), eq)
    return eq


def analytic_equilibrium(config: MarketConfig):
    """The no-dropout analytic equilibrium matching the information setting.

    Stage-only information uses the price-sequence equilibrium, full information
    the feedback form. When the interior solution leaves the price box, the
    bounded price-sequence equilibrium is used; it is a Nash equilibrium under
    either information structure because committed rivals make the observation
    irrelevant to a deviator.
    """
    from .market import Information, rollout

    nodrop = config.replace(dropouts=False)
    if config.information is Information.FULL:
        fb = solve_feedback_ne(nodrop)
        tr = rollout(fb.profile(), nodrop)
        raw = fb.lambda1 + fb.lambda2 * tr.demands
        if not _check_box(raw, tr.demands, nodrop):
            return fb
    try:
        return solve_open_loop_ne(nodrop)
    except ConstraintViolated:
        return solve_open_loop_box_ne(nodrop)


def baseline_equilibrium(config: MarketConfig) -> list:
    """Profile of :func:`analytic_equilibrium`, the welfare and predation benchmark."""
    return analytic_equilibrium(config).profile()
