"""Clipped-surrogate policy optimization over chain-arithmetic episodes.

One iteration samples a batch of episodes, scores them with the configured
hybrid reward, estimates advantages with GAE, and then runs a few epochs of
updates: the actor ascends mean(min(ratio * adv, clip(ratio) * adv)) minus a
KL-to-reference penalty, the critic descends squared error against the GAE
return targets.

The actor step is guarded by an acceptance check with backtracking: the
proposed step is shrunk by halves until it no longer lowers the penalized
sample objective it was computed from, and discarded outright if no shrink
helps. In ordinary regimes the full step passes; with an enormous KL
coefficient every step away from the reference is rejected, which is the
behavior a dominant penalty should have.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import policy as pol
from .actors import (CANDIDATE_STREAM_SEED, Actor, SamplingActor, play_episode)
from .optim import Adam
from .reward import RewardConfig, reward_schedule, score_trajectory
from .taskenv import (AnswerStage, Question, answer_stage, candidate_steps,
                      initial_state, transition)


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    kl_coeff: float = 0.01
    gamma: float = 1.0
    gae_lambda: float = 0.95
    actor_lr: float = 1e-3
    critic_lr: float = 2e-3
    rollouts_per_iter: int = 64
    update_epochs: int = 4
    iterations: int = 60
    temperature: float = 0.6
    normalize_advantages: bool = True
    reference: pol.PolicyParams | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be nonnegative")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")


@dataclass
class ActionStep:
    features: np.ndarray          # (m, F) rows for the offered actions
    index: int                    # row of the chosen action
    log_prob_old: float
    reward: float
    value_estimate: float
    state_features: np.ndarray    # (F,) critic input at the decision state
    action: int | str


@dataclass
class Trajectory:
    question_id: int
    steps: list[ActionStep]
    letter: str | None
    claims: tuple[int, ...]
    outcome: int
    process: tuple[float, ...]
    combined: float

    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    def values(self) -> np.ndarray:
        return np.array([s.value_estimate for s in self.steps])

    def mean_process(self) -> float:
        return float(np.mean(self.process)) if self.process else 0.0


def rollout(p: pol.PolicyParams, q: Question, reward_cfg: RewardConfig,
            ppo_cfg: PpoConfig, seed,
            icl_fn: Callable[[Question], object] | None = None,
            actor: Actor | None = None, num_candidates: int = 4,
            cand_seed: int = CANDIDATE_STREAM_SEED) -> Trajectory:
    """One scored episode. `seed` may be an int or a tuple of ints.

    log_prob_old is the log-probability under p at the configured temperature
    (identical to the sampling actor's own report when the default actor is
    used; recomputed for injected actors).
    """
    if actor is None:
        actor = SamplingActor(p, ppo_cfg.temperature, icl_fn)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ep = play_episode(actor, q, rng, num_candidates, cand_seed)
    icl = icl_fn(q) if icl_fn is not None else None

    scored = score_trajectory(q, ep.claims, ep.letter, reward_cfg)
    rewards = reward_schedule(scored, reward_cfg)

    steps: list[ActionStep] = []
    s = initial_state(q)
    for t, d in enumerate(ep.decisions):
        if isinstance(d.action, str):
            offered = answer_stage(q)
        else:
            offered = candidate_steps(q, s.step_index + 1, cand_seed, num_candidates)
        if d.features is not None and d.log_prob is not None:
            X, idx, lp = d.features, d.index, d.log_prob
        else:
            dist = pol.action_distribution(p, q, s, offered,
                                           ppo_cfg.temperature, icl)
            X = dist.features
            idx = dist.index_of(d.action)
            lp = float(dist.log_probs[idx])
        steps.append(ActionStep(
            features=X, index=int(idx), log_prob_old=float(lp),
            reward=float(rewards[t]),
            value_estimate=float(pol.value(p, q, s, icl)),
            state_features=pol.state_features(q, s, icl, p.layout),
            action=d.action))
        s = transition(s, d.action)
    return Trajectory(question_id=q.id, steps=steps, letter=ep.letter,
                      claims=ep.claims, outcome=scored.outcome,
                      process=scored.process, combined=scored.combined)


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float,
        lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and return targets; the post-terminal value is zero."""
    n = len(rewards)
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        next_v = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * next_v - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values


def compute_advantages(traj: Trajectory, gamma: float,
                       gae_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    return gae(traj.rewards(), traj.values(), gamma, gae_lambda)


def clipped_term(ratio, advantage, epsilon: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    return np.minimum(ratio * advantage, clipped * advantage)


@dataclass
class Batch:
    """All actions of a trajectory batch, flattened for vectorized updates."""

    X: np.ndarray          # (total_rows, F) candidate rows, segment per action
    seg_sizes: np.ndarray  # (n_actions,)
    chosen: np.ndarray     # (n_actions,) chosen row within each segment
    log_prob_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    state_X: np.ndarray    # (n_actions, F)
    log_prob_ref: np.ndarray | None

    @property
    def n_actions(self) -> int:
        return len(self.chosen)

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.seg_sizes)])


def _segment_log_probs(scores: np.ndarray, batch: Batch,
                       temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-action chosen log-prob and per-row probabilities."""
    sizes = batch.seg_sizes
    if np.all(sizes == sizes[0]):
        m = int(sizes[0])
        z = scores.reshape(-1, m) / temperature
        z = z - z.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logZ
        rows = np.arange(len(batch.chosen))
        return logp[rows, batch.chosen], np.exp(logp).ravel()
    lp_chosen = np.zeros(batch.n_actions)
    prob_rows = np.zeros(scores.shape[0])
    off = batch.offsets()
    for i in range(batch.n_actions):
        a, b = off[i], off[i + 1]
        probs, logp = pol.softmax_logits(scores[a:b], temperature)
        lp_chosen[i] = logp[batch.chosen[i]]
        prob_rows[a:b] = probs
    return lp_chosen, prob_rows


def action_log_probs(p: pol.PolicyParams, batch: Batch,
                     temperature: float) -> tuple[np.ndarray, np.ndarray]:
    scores = pol.scores_for(p, batch.X)
    return _segment_log_probs(scores, batch, temperature)


def build_batch(trajs: Sequence[Trajectory], cfg: PpoConfig) -> Batch:
    rows, sizes, chosen, lp_old, adv_all, ret_all, state_rows = \
        [], [], [], [], [], [], []
    for traj in trajs:
        adv, ret = compute_advantages(traj, cfg.gamma, cfg.gae_lambda)
        adv_all.append(adv)
        ret_all.append(ret)
        for st in traj.steps:
            rows.append(st.features)
            sizes.append(st.features.shape[0])
            chosen.append(st.index)
            lp_old.append(st.log_prob_old)
            state_rows.append(st.state_features)
    advantages = np.concatenate(adv_all)
    if cfg.normalize_advantages and len(advantages) > 1:
        std = advantages.std()
        advantages = (advantages - advantages.mean()) / (std + 1e-8)
    batch = Batch(X=np.concatenate(rows, axis=0),
                  seg_sizes=np.array(sizes),
                  chosen=np.array(chosen),
                  log_prob_old=np.array(lp_old),
                  advantages=advantages,
                  returns=np.concatenate(ret_all),
                  state_X=np.array(state_rows),
                  log_prob_ref=None)
    if cfg.reference is not None:
        batch.log_prob_ref, _ = action_log_probs(cfg.reference, batch,
                                                 cfg.temperature)
    return batch


def surrogate_objective(p: pol.PolicyParams, batch: Batch,
                        cfg: PpoConfig) -> float:
    """Mean clipped term minus the KL-to-reference penalty.

    The penalty is the nonnegative squared-difference estimator
    0.5 * mean((log pi_new - log pi_ref)^2): zero exactly at the reference
    with zero gradient there, so in the dominant-penalty limit every step
    away from the reference strictly lowers the objective. (The signed
    one-sample estimate mean(log pi_new - log pi_ref) can reward moving
    probability off the sampled actions; it is reported in UpdateStats but
    not optimized.)
    """
    lp_new, _ = action_log_probs(p, batch, cfg.temperature)
    ratio = np.exp(lp_new - batch.log_prob_old)
    obj = float(np.mean(clipped_term(ratio, batch.advantages, cfg.clip_epsilon)))
    if batch.log_prob_ref is not None and cfg.kl_coeff > 0:
        diff = lp_new - batch.log_prob_ref
        obj -= cfg.kl_coeff * 0.5 * float(np.mean(diff * diff))
    return obj


def surrogate_gradient(p: pol.PolicyParams, batch: Batch,
                       cfg: PpoConfig) -> np.ndarray:
    """Flat gradient of surrogate_objective at p.

    Where the clipped branch is strictly active the per-action contribution
    has zero gradient; elsewhere it is adv * ratio * grad log-prob. The KL
    penalty contributes -kl_coeff * (lp_new - lp_ref) * grad log-prob.
    """
    lp_new, prob_rows = action_log_probs(p, batch, cfg.temperature)
    ratio = np.exp(lp_new - batch.log_prob_old)
    un = ratio * batch.advantages
    cl = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) \
        * batch.advantages
    active = un <= cl  # unclipped branch selected (ties included)
    weight = np.where(active, batch.advantages * ratio, 0.0)
    if batch.log_prob_ref is not None and cfg.kl_coeff > 0:
        weight = weight - cfg.kl_coeff * (lp_new - batch.log_prob_ref)
    weight = weight / batch.n_actions

    coeff = -prob_rows / cfg.temperature
    off = batch.offsets()
    coeff *= np.repeat(weight, batch.seg_sizes)
    coeff[off[:-1] + batch.chosen] += weight / cfg.temperature
    return pol.scorer_grad(p, batch.X, coeff)


def value_loss_and_grad(p: pol.PolicyParams,
                        batch: Batch) -> tuple[float, np.ndarray]:
    v = pol.values_for(p, batch.state_X)
    err = v - batch.returns
    loss = float(np.mean(err * err))
    grad = pol.value_grad(p, batch.state_X, 2.0 * err / len(err))
    return loss, grad


@dataclass
class UpdateStats:
    mean_ratio: float = 1.0
    clip_fraction: float = 0.0
    kl: float = 0.0
    value_loss: float = 0.0
    steps_accepted: int = 0
    aborted: bool = False
    message: str = ""


def ppo_update(p: pol.PolicyParams, trajs: Sequence[Trajectory],
               cfg: PpoConfig, actor_opt: Adam | None = None,
               critic_opt: Adam | None = None
               ) -> tuple[pol.PolicyParams, UpdateStats]:
    """A few epochs of actor ascent and critic descent over one batch.

    Optimizer state may be threaded in by the caller (the training loop keeps
    one pair alive across iterations); fresh per-call state is the default.
    """
    batch = build_batch(trajs, cfg)
    params = p.copy()
    flat = params.flatten()
    if actor_opt is None:
        actor_opt = Adam(cfg.actor_lr)
    if critic_opt is None:
        critic_opt = Adam(cfg.critic_lr)
    stats = UpdateStats()
    for _ in range(cfg.update_epochs):
        obj = surrogate_objective(params, batch, cfg)
        if not np.isfinite(obj):
            return p, replace(stats, aborted=True,
                              message="non-finite surrogate objective")
        grad = surrogate_gradient(params, batch, cfg)
        if not np.all(np.isfinite(grad)):
            return p, replace(stats, aborted=True,
                              message="non-finite surrogate gradient")
        snap = actor_opt.snapshot()
        proposal = actor_opt.step(flat, -grad)
        delta = proposal - flat
        accepted = False
        shrink = 1.0
        for _ in range(6):  # backtrack: full step, then halvings
            cand_flat = flat + shrink * delta
            cand = pol.unflatten(cand_flat, p.layout, p.hidden)
            if surrogate_objective(cand, batch, cfg) >= obj:
                flat, params = cand_flat, cand
                accepted = True
                break
            shrink *= 0.5
        if accepted:
            stats.steps_accepted += 1
        else:
            actor_opt.restore(snap)

        vloss, vgrad = value_loss_and_grad(params, batch)
        flat = critic_opt.step(flat, vgrad)
        params = pol.unflatten(flat, p.layout, p.hidden)
        stats.value_loss = vloss

    lp_new, _ = action_log_probs(params, batch, cfg.temperature)
    ratio = np.exp(lp_new - batch.log_prob_old)
    stats.mean_ratio = float(ratio.mean())
    stats.clip_fraction = float(np.mean(
        (ratio < 1.0 - cfg.clip_epsilon) | (ratio > 1.0 + cfg.clip_epsilon)))
    if batch.log_prob_ref is not None:
        stats.kl = float(np.mean(lp_new - batch.log_prob_ref))
    return params, stats


@dataclass
class MetricsHistory:
    records: list[dict] = field(default_factory=list)
    # (outcome, mean process reward) per rollout, for reward-wiring analysis
    reward_pairs: list[tuple[int, float]] = field(default_factory=list)

    def mean_combined(self) -> float:
        vals = [r["mean_reward"] for r in self.records]
        return float(np.mean(vals)) if vals else 0.0


_HISTORY_KEYS = ("iteration", "mean_reward", "clip_fraction", "kl",
                 "train_accuracy")


def write_history(path, hist: MetricsHistory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in hist.records:
            fh.write(json.dumps({k: rec[k] for k in _HISTORY_KEYS}) + "\n")


def train_rft(p_init: pol.PolicyParams, trainset: Sequence[Question],
              reward_cfg: RewardConfig, ppo_cfg: PpoConfig, seed: int,
              icl_fn: Callable[[Question], object] | None = None,
              num_candidates: int = 4,
              cand_seed: int = CANDIDATE_STREAM_SEED
              ) -> tuple[pol.PolicyParams, MetricsHistory]:
    """Iterated rollout/update loop over a question pool.

    Questions are drawn per iteration without replacement while the pool is
    large enough, with replacement once the batch size exceeds the pool.
    """
    if not trainset:
        raise ValueError("train pool is empty")
    params = p_init.copy()
    hist = MetricsHistory()
    # one optimizer pair for the whole run; fresh Adam state every iteration
    # would take a full-size first step on each batch and never settle
    actor_opt = Adam(ppo_cfg.actor_lr)
    critic_opt = Adam(ppo_cfg.critic_lr)
    for it in range(ppo_cfg.iterations):
        rng = np.random.default_rng(
            np.random.SeedSequence((seed & 0xFFFFFFFF, it, 3)))
        replace_draw = len(trainset) < ppo_cfg.rollouts_per_iter
        picks = rng.choice(len(trainset), size=ppo_cfg.rollouts_per_iter,
                           replace=replace_draw)
        trajs = [rollout(params, trainset[int(j)], reward_cfg, ppo_cfg,
                         (seed & 0xFFFFFFFF, it, slot), icl_fn,
                         num_candidates=num_candidates, cand_seed=cand_seed)
                 for slot, j in enumerate(picks)]
        params, stats = ppo_update(params, trajs, ppo_cfg, actor_opt, critic_opt)
        hist.reward_pairs.extend((t.outcome, t.mean_process()) for t in trajs)
        hist.records.append({
            "iteration": it,
            "mean_reward": float(np.mean([t.combined for t in trajs])),
            "clip_fraction": stats.clip_fraction,
            "kl": stats.kl,
            "train_accuracy": float(np.mean([t.outcome for t in trajs])),
            "value_loss": stats.value_loss,
            "steps_accepted": stats.steps_accepted,
            "aborted": stats.aborted,
        })
    return params, hist
