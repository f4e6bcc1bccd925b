"""Actors that walk a question's decision chain, and the shared episode loop.

Candidate sets are regenerated on the fly rather than stored with traces, so
every consumer (synthesis, supervised training, rollouts, evaluation) must
derive them identically. The convention: candidate_steps is called with the
stream seed CANDIDATE_STREAM_SEED, which it mixes with (question id, step), so
the offered values for a given (question, step) are fixed for the lifetime of
an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import policy as pol
from .taskenv import (AnswerStage, CandidateSet, MdpState, Question, LETTERS,
                      answer_stage, candidate_steps, initial_state, transition)

CANDIDATE_STREAM_SEED = 0


@dataclass
class Decision:
    """One chosen action plus whatever the actor knows about the choice."""

    action: int | str
    log_prob: float | None = None
    index: int | None = None
    features: np.ndarray | None = None  # (m, F) rows for the offered actions
    probs: np.ndarray | None = None
    state_step: int = 0


class Actor:
    def decide(self, q: Question, s: MdpState,
               offered: CandidateSet | AnswerStage, rng) -> Decision:
        raise NotImplementedError


class OracleActor(Actor):
    """Always the true sub-result, always the gold letter."""

    def decide(self, q, s, offered, rng) -> Decision:
        if isinstance(offered, CandidateSet):
            return Decision(action=q.intermediates[offered.step_index - 1],
                            state_step=s.step_index)
        return Decision(action=q.gold_letter, state_step=s.step_index)


class FixedLetterActor(Actor):
    """Oracle on the steps, but a fixed final letter regardless of the gold."""

    def __init__(self, letter: str):
        if letter not in LETTERS:
            raise ValueError(f"letter must be one of {LETTERS}")
        self.letter = letter

    def decide(self, q, s, offered, rng) -> Decision:
        if isinstance(offered, CandidateSet):
            return Decision(action=q.intermediates[offered.step_index - 1],
                            state_step=s.step_index)
        return Decision(action=self.letter, state_step=s.step_index)


class UniformActor(Actor):
    """Uniform over whatever is offered; useful as a noise baseline."""

    def decide(self, q, s, offered, rng) -> Decision:
        actions = pol.offered_actions(offered)
        rng = pol.as_generator(rng)
        return Decision(action=actions[int(rng.integers(len(actions)))],
                        state_step=s.step_index)


class TruncatingActor(Actor):
    """Stops before the final answer by raising; models an unparseable trace."""

    class Truncated(Exception):
        pass

    def decide(self, q, s, offered, rng) -> Decision:
        if isinstance(offered, AnswerStage):
            raise self.Truncated
        return Decision(action=offered.candidates[0], state_step=s.step_index)


class SamplingActor(Actor):
    """Draws from the policy's softmax at a temperature, tracking log-probs."""

    def __init__(self, params: pol.PolicyParams,
                 temperature: float = pol.DEFAULT_TEMPERATURE,
                 icl_fn: Callable[[Question], object] | None = None):
        self.params = params
        self.temperature = temperature
        self.icl_fn = icl_fn

    def context_for(self, q: Question):
        return self.icl_fn(q) if self.icl_fn is not None else None

    def decide(self, q, s, offered, rng) -> Decision:
        dist = pol.action_distribution(self.params, q, s, offered,
                                       self.temperature, self.context_for(q))
        action, lp = pol.sample_action(dist, rng)
        return Decision(action=action, log_prob=lp, index=dist.index_of(action),
                        features=dist.features, probs=dist.probs,
                        state_step=s.step_index)


@dataclass
class Episode:
    question_id: int
    final_state: MdpState
    decisions: list[Decision]
    truncated: bool = False

    @property
    def claims(self) -> tuple[int, ...]:
        return self.final_state.claims

    @property
    def letter(self) -> str | None:
        return self.final_state.final_letter


def play_episode(actor: Actor, q: Question, rng,
                 num_candidates: int = 4,
                 cand_seed: int = CANDIDATE_STREAM_SEED) -> Episode:
    """Walk all k reasoning steps then the answer stage.

    `rng` seeds every decision in order, so one (actor, q, rng state) triple
    fixes the whole episode. A TruncatingActor ends the episode early with
    truncated=True and no final letter.
    """
    rng = pol.as_generator(rng)
    s = initial_state(q)
    decisions: list[Decision] = []
    try:
        for t in range(1, q.num_steps + 1):
            cands = candidate_steps(q, t, cand_seed, num_candidates)
            d = actor.decide(q, s, cands, rng)
            decisions.append(d)
            s = transition(s, d.action, cands)
        stage = answer_stage(q)
        d = actor.decide(q, s, stage, rng)
        decisions.append(d)
        s = transition(s, d.action)
    except TruncatingActor.Truncated:
        return Episode(question_id=q.id, final_state=s, decisions=decisions,
                       truncated=True)
    return Episode(question_id=q.id, final_state=s, decisions=decisions)
