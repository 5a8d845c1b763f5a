"""Predatory incentives, surplus, welfare differences and market regimes."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigMismatch, EmptyInput, LengthMismatch
from .market import StageOutcome, Trajectory


class Regime(str, enum.Enum):
    DOMINANCE = "dominance"
    PREDATION = "predation"
    COMPETITION = "competition"
    MARGINALIZATION = "marginalization"
    OTHER = "other"


# tie-break order for majority votes: less competitive first
SEVERITY = [Regime.DOMINANCE, Regime.PREDATION, Regime.COMPETITION, Regime.MARGINALIZATION, Regime.OTHER]


@dataclass(frozen=True)
class PredationRecord:
    agent: int
    tau: Optional[int]
    sacrifice: float
    recoupment: float

    @property
    def PI(self) -> float:
        return self.recoupment - self.sacrifice


@dataclass(frozen=True)
class WelfareRecord:
    producer_surplus: np.ndarray  # per stage
    consumer_surplus: np.ndarray
    baseline_producer_surplus: np.ndarray
    baseline_consumer_surplus: np.ndarray

    @property
    def W(self) -> float:
        return float(np.sum(self.consumer_surplus + self.producer_surplus))

    @property
    def PS(self) -> float:
        return float(np.sum(self.producer_surplus))

    @property
    def CS(self) -> float:
        return float(np.sum(self.consumer_surplus))

    @property
    def dPS(self) -> float:
        return float(np.sum(self.producer_surplus - self.baseline_producer_surplus))

    @property
    def dCS(self) -> float:
        return float(np.sum(self.consumer_surplus - self.baseline_consumer_surplus))

    @property
    def dW(self) -> float:
        return self.dPS + self.dCS


def predatory_incentive(pi_rewards, equ_rewards, tau: Optional[int], agent: int = 0) -> PredationRecord:
    """Sacrifice before the first rival exit and recoupment from it on.

    ``tau`` is the 1-based stage from which a rival is absent, or ``None``.
    """
    pi_rewards = np.asarray(pi_rewards, dtype=float)
    equ_rewards = np.asarray(equ_rewards, dtype=float)
    if pi_rewards.shape != equ_rewards.shape:
        raise LengthMismatch(f"reward sequences differ in length: {pi_rewards.shape} vs {equ_rewards.shape}")
    if tau is None:
        return PredationRecord(agent, None, 0.0, 0.0)
    k = tau - 1
    sacrifice = float(np.maximum(0.0, equ_rewards[:k] - pi_rewards[:k]).sum())
    recoupment = float(np.maximum(0.0, pi_rewards[k:] - equ_rewards[k:]).sum())
    return PredationRecord(agent, tau, sacrifice, recoupment)


def effective_exits(traj: Trajectory) -> dict:
    """Agents absent from some played stage, mapped to that first stage.

    An exit triggered by the last stage's demand update affects no payoff
    and is not counted.
    """
    T = len(traj.outcomes)
    return {i: s for i, s in traj.exit_stage().items() if s <= T}


def first_rival_exit(traj: Trajectory, agent: int) -> Optional[int]:
    stages = [s for j, s in effective_exits(traj).items() if j != agent]
    return min(stages) if stages else None


def predation_records(traj: Trajectory, baseline: Trajectory) -> list:
    pi_r, equ_r = traj.rewards, baseline.rewards
    if pi_r.shape != equ_r.shape:
        raise LengthMismatch("trajectory and baseline differ in shape")
    return [predatory_incentive(pi_r[:, i], equ_r[:, i], first_rival_exit(traj, i), i)
            for i in range(pi_r.shape[1])]


def surplus(outcome: StageOutcome):
    """(producer surplus, consumer surplus) of one stage; inactive firms contribute 0."""
    return float(np.sum(outcome.rewards)), float(np.sum(np.square(outcome.quantities)))


def welfare_difference(traj: Trajectory, baseline: Trajectory) -> WelfareRecord:
    if len(traj.outcomes) != len(baseline.outcomes) or len(traj.states[0].demands) != len(baseline.states[0].demands):
        raise ConfigMismatch("trajectory and baseline come from different game shapes")
    if not np.array_equal(traj.states[0].demands, baseline.states[0].demands):
        raise ConfigMismatch("trajectory and baseline start from different demands")
    ps, cs = np.array([surplus(o) for o in traj.outcomes]).T
    bps, bcs = np.array([surplus(o) for o in baseline.outcomes]).T
    return WelfareRecord(ps, cs, bps, bcs)


def classify_regime(traj: Trajectory, focal: int = 0) -> Regime:
    """Label by which firms are pushed out; ``focal`` is the cost-varied firm."""
    gone = set(effective_exits(traj))
    rivals = set(range(len(traj.states[0].demands))) - {focal}
    if focal in gone:
        return Regime.MARGINALIZATION if not (gone & rivals) else Regime.OTHER
    out = len(gone & rivals)
    if out == 0:
        return Regime.COMPETITION
    if out == len(rivals):
        return Regime.DOMINANCE
    if out == 1:
        return Regime.PREDATION
    return Regime.OTHER


def aggregate_regime(labels: Sequence) -> Regime:
    """Majority vote; ties go to the less competitive regime."""
    if not labels:
        raise EmptyInput("no regime labels to aggregate")
    counts = Counter(Regime(x) for x in labels)
    top = max(counts.values())
    return next(r for r in SEVERITY if counts.get(r, 0) == top)
