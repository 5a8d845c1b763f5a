"""Self-play policy-gradient learning with beta-distributed prices.

Every firm owns an independent network; all networks live in one
:class:`StackedMLP` whose layers are batched matrix products over a leading
member axis. Losses are summed over members, and Adam is elementwise, so this
is the same as running one optimizer per firm, only faster.

A network maps an encoded observation to ``(alpha, beta)`` with
``softplus(.) + 1`` (plus a tiny floor) so both exceed one; a draw ``x ~ Beta(alpha, beta)`` becomes
the price ``c_i + x * (p_max - c_i)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DivergedTraining
from .market import Information, MarketConfig, Observation, transition

log = logging.getLogger(__name__)

REINFORCE = "reinforce"
PPO = "ppo"

_X_EPS = 1e-6
# keeps alpha, beta > 1 after rounding; softplus underflows for outputs below about -37
_HEAD_EPS = 1e-6


@dataclass(frozen=True)
class PolicySpec:
    hidden_layers: int = 3
    units_per_layer: int = 64


@dataclass(frozen=True)
class TrainConfig:
    algo: str = PPO
    iterations: int = 1000
    trajectories_per_iteration: int = 20000
    learning_rate: Optional[float] = None
    lr_decay_every: int = 250
    lr_divisor: Optional[float] = None
    seed: int = 0
    threads: int = 1
    policy: PolicySpec = PolicySpec()
    # PPO
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 1.0
    epochs: int = 10
    minibatch: int = 2048
    value_coef: float = 0.5
    entropy_coef: float = 0.0

    def __post_init__(self):
        if self.algo not in (PPO, REINFORCE):
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.iterations < 1 or self.trajectories_per_iteration < 1:
            raise ValueError("iterations and trajectories_per_iteration must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 8.57e-4 if self.algo == PPO else 2.864e-4

    @property
    def divisor(self) -> float:
        if self.lr_divisor is not None:
            return self.lr_divisor
        return 8.0 if self.algo == PPO else 2.0

    def lr_at(self, iteration: int) -> float:
        return self.lr / self.divisor ** (iteration // self.lr_decay_every)


class StackedMLP(torch.nn.Module):
    """``members`` independent SELU MLPs evaluated with batched matmuls."""

    def __init__(self, members: int, in_dim: int, out_dim: int, hidden=(64, 64, 64),
                 head_scale: float = 0.01, dtype=torch.float32, generator=None):
        super().__init__()
        sizes = [in_dim, *hidden, out_dim]
        self.weights = torch.nn.ParameterList()
        self.biases = torch.nn.ParameterList()
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            # LeCun normal suits SELU; the head starts small so initial policies are broad
            std = 1.0 / math.sqrt(a) * (head_scale if k == len(sizes) - 2 else 1.0)
            w = torch.randn(members, a, b, dtype=dtype, generator=generator) * std
            self.weights.append(torch.nn.Parameter(w))
            self.biases.append(torch.nn.Parameter(torch.zeros(members, 1, b, dtype=dtype)))

    @property
    def members(self) -> int:
        return self.weights[0].shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (members, batch, in_dim) -> (members, batch, out_dim)."""
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.baddbmm(b, x, w)
            if k < last:
                x = F.selu(x)
        return x

    def forward_member(self, x: torch.Tensor, m: int) -> torch.Tensor:
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.addmm(b[m], x, w[m])
            if k < last:
                x = F.selu(x)
        return x

    def layer_shapes(self) -> list:
        return [list(w.shape[1:]) for w in self.weights]


@dataclass(frozen=True)
class SharedRows:
    """Observation rows seen by every firm, stored once.

    Firms see the same observation, and with partial information there are
    only T distinct rows, so networks run on ``table`` and results are
    gathered through ``index``.
    """

    table: torch.Tensor  # (U, d)
    index: Optional[torch.Tensor] = None  # (M,) rows of ``table``; None means identity

    @classmethod
    def of(cls, obs: torch.Tensor) -> "SharedRows":
        uniq, inv = torch.unique(obs, dim=0, return_inverse=True)
        if 2 * uniq.shape[0] <= obs.shape[0]:
            return cls(uniq, inv)
        return cls(obs)

    def take(self, idx: torch.Tensor) -> "SharedRows":
        if self.index is None:
            return SharedRows(self.table[idx])
        return SharedRows(self.table, self.index[idx])

    def forward(self, net: "StackedMLP") -> torch.Tensor:
        out = net(self.table.expand(net.members, -1, -1))
        return out if self.index is None else out[:, self.index]


def shared_forward(net: "StackedMLP", obs) -> torch.Tensor:
    """Every member on the same rows: (M, d) or :class:`SharedRows` -> (members, M, out)."""
    rows = obs if isinstance(obs, SharedRows) else SharedRows.of(obs)
    return rows.forward(net)


def beta_params(out: torch.Tensor):
    return F.softplus(out[..., 0]) + (1.0 + _HEAD_EPS), F.softplus(out[..., 1]) + (1.0 + _HEAD_EPS)


def beta_log_prob(x, a, b):
    return ((a - 1) * torch.log(x) + (b - 1) * torch.log1p(-x)
            + torch.lgamma(a + b) - torch.lgamma(a) - torch.lgamma(b))


def beta_mode(a, b):
    return (a - 1) / (a + b - 2)


def obs_dim(config: MarketConfig) -> int:
    return 1 if config.information is Information.PARTIAL else 1 + 2 * config.n_agents


def encode_observation(obs: Observation, config: MarketConfig) -> np.ndarray:
    """Features ``[t/T]`` or ``[t/T, D/D_cap..., active...]``; keeps any batch axis."""
    tt = obs.t / config.horizon
    if config.information is Information.PARTIAL or obs.demands is None:
        if config.information is Information.FULL:
            raise ValueError("full-information encoding needs demands")
        return np.array([tt])
    d = np.asarray(obs.demands, dtype=float) / config.demand_cap
    a = np.asarray(obs.active, dtype=float)
    t = np.full(d.shape[:-1] + (1,), tt)
    return np.concatenate([t, d, a], axis=-1)


def price_from_unit(x, agent: int, config: MarketConfig):
    c = config.unit_costs[agent]
    return c + x * (config.price_cap - c)


def policy_act(actor: StackedMLP, agent: int, obs: Observation, config: MarketConfig,
               mode: str = "mode", rng=None) -> np.ndarray:
    """Price(s) for ``agent``: the beta mode, or a draw when ``mode='sample'``."""
    feats = encode_observation(obs, config)
    batch = feats.reshape(-1, feats.shape[-1])
    p = next(actor.parameters())
    with torch.no_grad():
        a, b = beta_params(actor.forward_member(torch.as_tensor(batch, dtype=p.dtype), agent))
    a = a.double().numpy()
    b = b.double().numpy()
    if mode == "mode":
        x = (a - 1) / (a + b - 2)
    elif mode == "sample":
        x = np.random.default_rng(rng).beta(a, b)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return price_from_unit(x, agent, config)


class NetworkPolicy:
    """One firm's network as a policy over (possibly batched) observations."""

    kind = "network"

    def __init__(self, actor: StackedMLP, agent: int, config: MarketConfig, mode: str = "mode"):
        self.actor = actor
        self.agent = agent
        self.config = config
        self.mode = mode
        self.deterministic = mode == "mode"

    def __call__(self, obs: Observation, rng=None) -> np.ndarray:
        return policy_act(self.actor, self.agent, obs, self.config, self.mode, rng)


@dataclass
class Batch:
    """Self-play samples, agent-major: arrays are (N, B, T), observations are shared."""

    obs: torch.Tensor  # (B, T, d), identical for every agent
    x: torch.Tensor  # unit-interval actions
    mask: torch.Tensor  # 1 where the agent was active and acted
    rewards: torch.Tensor
    logp: torch.Tensor  # behaviour log-probabilities
    values: Optional[torch.Tensor] = None

    @property
    def n_trajectories(self) -> int:
        return self.obs.shape[0]

    def returns_to_go(self) -> torch.Tensor:
        return torch.flip(torch.cumsum(torch.flip(self.rewards, [-1]), -1), [-1])

    def utilities(self) -> np.ndarray:
        return self.rewards.sum(-1).mean(-1).double().numpy()


def collect(actor: StackedMLP, config: MarketConfig, n: int, rng: np.random.Generator,
            critic: Optional[StackedMLP] = None) -> Batch:
    """Play ``n`` trajectories with every agent sampling from its current policy."""
    N, T = config.n_agents, config.horizon
    dt = next(actor.parameters()).dtype
    costs = config.costs
    span = config.price_cap - costs
    demands = np.tile(np.asarray(config.initial_demands, dtype=float), (n, 1))
    active = np.ones((n, N), dtype=bool)
    d = obs_dim(config)
    obs = np.empty((n, T, d))
    xs = np.empty((N, n, T))
    mask = np.empty((N, n, T))
    rewards = np.empty((N, n, T))
    logps = torch.empty((N, n, T), dtype=dt)
    values = torch.empty((N, n, T), dtype=dt) if critic is not None else None
    for t in range(1, T + 1):
        feats = np.broadcast_to(encode_observation(Observation(t, demands, active), config), (n, d))
        obs[:, t - 1] = feats
        inp = torch.as_tensor(np.array(feats), dtype=dt)
        with torch.no_grad():
            a, b = beta_params(shared_forward(actor, inp))
            if critic is not None:
                values[:, :, t - 1] = shared_forward(critic, inp)[..., 0]
        x = rng.beta(a.double().numpy(), b.double().numpy())
        x = np.clip(x, _X_EPS, 1 - _X_EPS)
        with torch.no_grad():
            logps[:, :, t - 1] = beta_log_prob(torch.as_tensor(x, dtype=dt), a, b)
        prices = costs + x.T * span
        tr = transition(demands, prices, active, costs, config.dropouts_enabled)
        xs[:, :, t - 1] = x
        mask[:, :, t - 1] = active.T
        rewards[:, :, t - 1] = tr.rewards.T
        demands, active = tr.demands, tr.active
    as_t = lambda v: torch.as_tensor(v, dtype=dt)  # noqa: E731
    return Batch(as_t(obs), as_t(xs), as_t(mask), as_t(rewards), logps, values)


def reinforce_loss(actor: StackedMLP, batch: Batch) -> torch.Tensor:
    """Negative policy-gradient surrogate, summed over agents.

    Per agent: ``-(1/B) sum_{b,t} log pi(x|o) (G_t - baseline_t)`` with the
    baseline the batch mean return-to-go at stage ``t`` over active samples.
    """
    B, T, d = batch.obs.shape
    N = batch.x.shape[0]
    G = batch.returns_to_go()
    counts = batch.mask.sum(1, keepdim=True).clamp(min=1)
    baseline = (G * batch.mask).sum(1, keepdim=True) / counts
    adv = (G - baseline) * batch.mask
    a, b = beta_params(shared_forward(actor, batch.obs.reshape(B * T, d)))
    logp = beta_log_prob(batch.x.reshape(N, B * T), a, b).reshape(N, B, T)
    return -(logp * adv.detach()).sum() / B


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def reinforce_update(learner: "SelfPlayLearner", batch: Batch, lr: float) -> "SelfPlayLearner":
    _set_lr(learner.optimizer, lr)
    learner.optimizer.zero_grad()
    reinforce_loss(learner.actor, batch).backward()
    learner.optimizer.step()
    return learner


def gae(batch: Batch, gamma: float, lam: float):
    """Advantages and value targets. An agent's episode ends at T or when it exits."""
    r, v, m = batch.rewards, batch.values, batch.mask
    T = r.shape[-1]
    adv = torch.zeros_like(r)
    running = torch.zeros_like(r[..., 0])
    for t in reversed(range(T)):
        if t + 1 < T:
            nonterminal = m[..., t + 1]
            next_v = v[..., t + 1] * nonterminal
        else:
            nonterminal = torch.zeros_like(running)
            next_v = torch.zeros_like(running)
        delta = r[..., t] + gamma * next_v - v[..., t]
        running = delta + gamma * lam * nonterminal * running
        adv[..., t] = running
    adv = adv * m
    return adv, (adv + v) * m


def ppo_loss(actor: StackedMLP, critic: StackedMLP, obs, x, logp_old, adv, ret, mask,
             clip: float = 0.2, value_coef: float = 0.5, entropy_coef: float = 0.0,
             normalize: bool = True) -> torch.Tensor:
    """Clipped surrogate plus value loss on flat samples.

    ``obs`` is (M, d) or :class:`SharedRows`; the other arrays are (N, M).
    """
    rows = obs if isinstance(obs, SharedRows) else SharedRows.of(obs)
    counts = mask.sum(1).clamp(min=1)
    if normalize:
        mean = (adv * mask).sum(1, keepdim=True) / counts[:, None]
        var = (((adv - mean) * mask) ** 2).sum(1, keepdim=True) / counts[:, None]
        adv = (adv - mean) / (var.sqrt() + 1e-8) * mask
    a, b = beta_params(rows.forward(actor))
    logp = beta_log_prob(x, a, b)
    ratio = torch.exp(logp - logp_old)
    surr = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)
    pg = -(surr * mask).sum(1) / counts
    v = rows.forward(critic)[..., 0]
    vf = (((v - ret) ** 2) * mask).sum(1) / counts
    loss = pg + value_coef * vf
    if entropy_coef:
        ent = torch.distributions.Beta(a, b).entropy()
        loss = loss - entropy_coef * (ent * mask).sum(1) / counts
    return loss.sum()


def ppo_update(learner: "SelfPlayLearner", batch: Batch, lr: float, rng: np.random.Generator) -> "SelfPlayLearner":
    tc = learner.train_config
    _set_lr(learner.optimizer, lr)
    adv, ret = gae(batch, tc.gamma, tc.gae_lambda)
    B, T, d = batch.obs.shape
    N = batch.x.shape[0]
    flat = lambda z: z.reshape(N, B * T)  # noqa: E731
    obs = SharedRows.of(batch.obs.reshape(B * T, d))
    x, logp_old, mask = flat(batch.x), flat(batch.logp), flat(batch.mask)
    adv, ret = flat(adv), flat(ret)
    M = B * T
    for _ in range(tc.epochs):
        perm = torch.as_tensor(rng.permutation(M))
        for start in range(0, M, tc.minibatch):
            idx = perm[start:start + tc.minibatch]
            learner.optimizer.zero_grad()
            loss = ppo_loss(learner.actor, learner.critic, obs.take(idx), x[:, idx], logp_old[:, idx],
                            adv[:, idx], ret[:, idx], mask[:, idx], tc.clip, tc.value_coef, tc.entropy_coef)
            loss.backward()
            learner.optimizer.step()
    return learner


class SelfPlayLearner:
    def __init__(self, config: MarketConfig, train_config: TrainConfig, dtype=torch.float32):
        self.config = config
        self.train_config = train_config
        gen = torch.Generator().manual_seed(train_config.seed)
        hidden = (train_config.policy.units_per_layer,) * train_config.policy.hidden_layers
        self.actor = StackedMLP(config.n_agents, obs_dim(config), 2, hidden, dtype=dtype, generator=gen)
        params = list(self.actor.parameters())
        self.critic = None
        if train_config.algo == PPO:
            self.critic = StackedMLP(config.n_agents, obs_dim(config), 1, hidden, head_scale=1.0,
                                     dtype=dtype, generator=gen)
            params += list(self.critic.parameters())
        self.optimizer = torch.optim.Adam(params, lr=train_config.lr)

    def policies(self, mode: str = "mode") -> list:
        return [NetworkPolicy(self.actor, i, self.config, mode) for i in range(self.config.n_agents)]


@dataclass
class LearnedProfile:
    config: MarketConfig
    train_config: TrainConfig
    actor: StackedMLP
    training_log: list = field(default_factory=list)  # dicts: iteration, agent, mean_utility, lr

    def policies(self, mode: str = "mode") -> list:
        return [NetworkPolicy(self.actor, i, self.config, mode) for i in range(self.config.n_agents)]


def train_selfplay(config: MarketConfig, algo: str = PPO, tc: Optional[TrainConfig] = None,
                   progress=None) -> LearnedProfile:
    """Simultaneous self-play: all agents sample, all agents update from the same batch."""
    tc = replace(tc or TrainConfig(), algo=algo)
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(tc.threads)
    try:
        learner = SelfPlayLearner(config, tc)
        seeds = np.random.SeedSequence(tc.seed)
        rng = np.random.default_rng(seeds.spawn(1)[0])
        history = []
        for it in range(tc.iterations):
            lr = tc.lr_at(it)
            batch = collect(learner.actor, config, tc.trajectories_per_iteration, rng, learner.critic)
            u = batch.utilities()
            if not np.all(np.isfinite(u)):
                raise DivergedTraining(f"iteration {it}: non-finite mean utility {u}")
            for i, ui in enumerate(u):
                history.append({"iteration": it, "agent": i, "mean_utility": float(ui), "lr": lr})
            if algo == PPO:
                ppo_update(learner, batch, lr, rng)
            else:
                reinforce_update(learner, batch, lr)
            if progress is not None:
                progress(it, u)
        return LearnedProfile(config, tc, learner.actor, history)
    finally:
        torch.set_num_threads(prev_threads)
