"""Outcome reward, oracle process reward, aggregation, and their combination.

The per-sample scalar is R = alpha * outcome + (1 - alpha) * f(process
rewards), with f one of mean/min/last/product. The process reward is an
oracle against the gold intermediates: binary by default, or a soft
exp(-|error|/scale) mode standing in for a noisy learned step scorer.
RL needs the scalar placed on the episode; reward_schedule does that either
all-at-the-end (default) or spread per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .taskenv import Question

AGGREGATIONS = ("mean", "min", "last", "product")
PRM_MODES = ("binary", "soft")
PLACEMENTS = ("terminal", "per_step")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.7
    aggregation: str = "mean"
    prm_mode: str = "binary"
    prm_scale: float = 10.0
    placement: str = "terminal"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.prm_mode not in PRM_MODES:
            raise ValueError(f"prm_mode must be one of {PRM_MODES}")
        if self.prm_mode == "soft" and self.prm_scale <= 0:
            raise ValueError("prm_scale must be positive in soft mode")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")

    def to_record(self) -> dict:
        return {"alpha": self.alpha, "aggregation": self.aggregation,
                "prm_mode": self.prm_mode, "prm_scale": self.prm_scale,
                "placement": self.placement}

    @classmethod
    def from_record(cls, rec: Mapping) -> "RewardConfig":
        known = {k: rec[k] for k in
                 ("alpha", "aggregation", "prm_mode", "prm_scale", "placement")
                 if k in rec}
        return cls(**known)


@dataclass(frozen=True)
class StepRewards:
    process: tuple[float, ...]
    outcome: int
    combined: float


def outcome_reward(predicted: str | None, gold: str) -> int:
    """1 iff the letters match after uppercasing; None (no parse) scores 0."""
    if predicted is None:
        return 0
    return int(predicted.upper() == gold.upper())


def process_reward(q: Question, t: int, claim: int, mode: str = "binary",
                   scale: float = 10.0) -> float:
    if not 1 <= t <= q.num_steps:
        raise ValueError(f"step index {t} outside [1, {q.num_steps}]")
    gold = q.intermediates[t - 1]
    if mode == "binary":
        return 1.0 if claim == gold else 0.0
    if mode == "soft":
        return math.exp(-abs(claim - gold) / scale)
    raise ValueError(f"unknown process-reward mode: {mode!r}")


def step_rewards(q: Question, claims: Sequence[int], cfg: RewardConfig) -> list[float]:
    return [process_reward(q, t, c, cfg.prm_mode, cfg.prm_scale)
            for t, c in enumerate(claims, start=1)]


def aggregate(prs: Sequence[float], strategy: str = "mean") -> float:
    if len(prs) == 0:
        raise ValueError("cannot aggregate an empty reward list")
    if strategy == "mean":
        return sum(prs) / len(prs)
    if strategy == "min":
        return min(prs)
    if strategy == "last":
        return prs[-1]
    if strategy == "product":
        out = 1.0
        for x in prs:
            out *= x
        return out
    raise ValueError(f"unknown aggregation strategy: {strategy!r}")


def combine(outcome: int, prs: Sequence[float], cfg: RewardConfig) -> float:
    return cfg.alpha * outcome + (1.0 - cfg.alpha) * aggregate(prs, cfg.aggregation)


def score_trajectory(q: Question, claims: Sequence[int], letter: str | None,
                     cfg: RewardConfig) -> StepRewards:
    prs = step_rewards(q, claims, cfg)
    out = outcome_reward(letter, q.gold_letter)
    return StepRewards(process=tuple(prs), outcome=out,
                       combined=combine(out, prs, cfg))


def reward_schedule(rewards: StepRewards, cfg: RewardConfig) -> list[float]:
    """Per-action reward list: m step entries followed by the answer entry.

    Terminal placement parks the whole combined scalar on the final action.
    Per-step placement pays (1-alpha)*pr_t/m at step t and alpha*outcome at
    the end; for mean aggregation the episode totals of the two placements
    coincide exactly.
    """
    m = len(rewards.process)
    if cfg.placement == "terminal":
        return [0.0] * m + [rewards.combined]
    per = [(1.0 - cfg.alpha) * pr / m for pr in rewards.process]
    return per + [cfg.alpha * rewards.outcome]
