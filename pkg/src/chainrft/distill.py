"""Reasoning-trace synthesis by rejection sampling, and supervised training.

Synthesis rolls the policy out on each question until the parsed final letter
matches the gold one, keeping the first success. Questions that defeat all
attempts fall back to an answer-only record: the gold letter with no steps.
Kept traces may pair a correct answer with wrong intermediate claims; that is
deliberate, it is the failure mode supervised imitation inherits.

The mismatched-teacher variant emits coarser-grained traces (g ops merged per
claim) and projects them onto the student's per-step candidate sets, so most
projected actions are wrong even though the final letter is right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import policy as pol
from .actors import CANDIDATE_STREAM_SEED, SamplingActor, play_episode
from .optim import Adam
from .taskenv import (LETTERS, Question, answer_stage, candidate_steps,
                      extract_letter, initial_state, serialize_trace, transition)


@dataclass(frozen=True)
class ProcessRecord:
    question_id: int
    claims: tuple[int, ...]
    letter: str
    attempts_used: int
    fallback: bool


@dataclass
class ProcessDataset:
    records: list[ProcessRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def fallback_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.fallback for r in self.records) / len(self.records)


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 1e-3
    epochs: int = 8
    batch_size: int = 8
    shuffle_seed: int = 0
    temperature: float = 1.0  # likelihood temperature during imitation

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


def synthesize_traces(p: pol.PolicyParams, questions: Sequence[Question],
                      max_attempts: int = 64,
                      temperature: float = pol.DEFAULT_TEMPERATURE,
                      seed: int = 0,
                      icl_fn: Callable[[Question], object] | None = None,
                      num_candidates: int = 4,
                      cand_seed: int = CANDIDATE_STREAM_SEED) -> ProcessDataset:
    """First sampled trace whose parsed answer is gold, else the fallback."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    actor = SamplingActor(p, temperature, icl_fn)
    out = ProcessDataset()
    for q in questions:
        rec = None
        for attempt in range(1, max_attempts + 1):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed & 0xFFFFFFFF, q.id, attempt)))
            ep = play_episode(actor, q, rng, num_candidates, cand_seed)
            letter = extract_letter(serialize_trace(q, ep.final_state))
            if letter == q.gold_letter:
                rec = ProcessRecord(q.id, ep.claims, letter, attempt, False)
                break
        if rec is None:
            rec = ProcessRecord(q.id, (), q.gold_letter, max_attempts, True)
        out.records.append(rec)
    out.records.sort(key=lambda r: r.question_id)
    return out


def oracle_traces(questions: Sequence[Question]) -> ProcessDataset:
    """Perfect single-step traces; the teacher for source-domain pretraining."""
    return ProcessDataset([
        ProcessRecord(q.id, q.intermediates, q.gold_letter, 1, False)
        for q in questions])


def project_claim(claim: int, candidates: Sequence[int]) -> int:
    """Nearest candidate by absolute difference; ties take the smaller value."""
    return min(candidates, key=lambda c: (abs(c - claim), c))


def synthesize_mismatched(teacher_granularity: int, questions: Sequence[Question],
                          seed: int = 0, num_candidates: int = 4,
                          cand_seed: int = CANDIDATE_STREAM_SEED) -> ProcessDataset:
    """Coarse teacher traces projected onto the student's candidate sets.

    The teacher reports one claim per g consecutive ops (the value after ops
    1..g, then after ops g+1..2g, and so on), so its j-th claim lands on the
    student's step-j candidate set, where it usually matches nothing and the
    nearest distractor gets recorded instead. g=1 reduces to the oracle.
    `seed` is accepted for interface symmetry; the construction has no random
    choices.
    """
    g = int(teacher_granularity)
    if g < 1:
        raise ValueError("teacher granularity must be at least 1")
    out = ProcessDataset()
    for q in questions:
        k = q.num_steps
        merged = [q.intermediates[min(j * g, k) - 1]
                  for j in range(1, -(-k // g) + 1)]
        claims = []
        for j, claim in enumerate(merged, start=1):
            cands = candidate_steps(q, j, cand_seed, num_candidates)
            claims.append(project_claim(claim, cands.candidates))
        out.records.append(
            ProcessRecord(q.id, tuple(claims), q.gold_letter, 1, False))
    return out


# Supervised loss. A record contributes one log-prob term per action in its
# trace: each recorded claim against the candidate set it was drawn from, then
# the final letter against the full option set. Fallback records have no
# claims, so only the letter term remains, evaluated at the initial state.

def record_decision_points(q: Question, rec: ProcessRecord,
                           num_candidates: int = 4,
                           cand_seed: int = CANDIDATE_STREAM_SEED):
    s = initial_state(q)
    points = []
    for t, claim in enumerate(rec.claims, start=1):
        cands = candidate_steps(q, t, cand_seed, num_candidates)
        points.append((s, cands, claim))
        s = transition(s, int(claim), cands)
    points.append((s, answer_stage(q), rec.letter))
    return points


def sft_loss(p: pol.PolicyParams, q: Question, rec: ProcessRecord,
             temperature: float = 1.0, icl=None, num_candidates: int = 4,
             cand_seed: int = CANDIDATE_STREAM_SEED) -> float:
    total = 0.0
    for s, offered, action in record_decision_points(q, rec, num_candidates, cand_seed):
        total -= pol.log_prob(p, q, s, offered, action, temperature, icl)
    return total


def sft_grad(p: pol.PolicyParams, q: Question, rec: ProcessRecord,
             temperature: float = 1.0, icl=None, num_candidates: int = 4,
             cand_seed: int = CANDIDATE_STREAM_SEED) -> np.ndarray:
    grad = np.zeros(p.num_params)
    for s, offered, action in record_decision_points(q, rec, num_candidates, cand_seed):
        grad -= pol.grad_log_prob(p, q, s, offered, action, temperature, icl)
    return grad


def _batch_loss_grad(p: pol.PolicyParams, batch, temperature: float,
                     icl_for, num_candidates: int, cand_seed: int):
    """Mean per-record loss and gradient over a batch, one kernel pass each."""
    rows = []
    chosen = []
    seg_sizes = []
    for q, rec in batch:
        icl = icl_for(q)
        for s, offered, action in record_decision_points(q, rec, num_candidates,
                                                         cand_seed):
            X = pol.candidate_features(q, s, offered, icl, p.layout)
            rows.append(X)
            acts = pol.offered_actions(offered)
            chosen.append(acts.index(action))
            seg_sizes.append(X.shape[0])
    X_all = np.concatenate(rows, axis=0)
    scores = pol.scores_for(p, X_all)
    loss = 0.0
    coeff = np.zeros(X_all.shape[0])
    offset = 0
    for size, idx in zip(seg_sizes, chosen):
        probs, log_probs = pol.softmax_logits(scores[offset:offset + size],
                                              temperature)
        loss -= float(log_probs[idx])
        coeff[offset:offset + size] = probs / temperature
        coeff[offset + idx] -= 1.0 / temperature
        offset += size
    scale = 1.0 / len(batch)
    grad = pol.scorer_grad(p, X_all, coeff * scale)
    return loss * scale, grad


def sft_train(p: pol.PolicyParams, dataset: ProcessDataset,
              questions: Sequence[Question] | Mapping[int, Question],
              cfg: SftConfig = SftConfig(),
              icl_fn: Callable[[Question], object] | None = None,
              num_candidates: int = 4,
              cand_seed: int = CANDIDATE_STREAM_SEED):
    """Mini-batch gradient descent (adaptive per-parameter steps) on the
    imitation loss.

    Returns (new params, history); history carries per-epoch mean loss and a
    warning entry when the dataset is empty (parameters then pass through
    unchanged).
    """
    by_id = (questions if isinstance(questions, Mapping)
             else {q.id: q for q in questions})
    pairs = [(by_id[r.question_id], r) for r in dataset]
    if not pairs:
        return p.copy(), {"epoch_loss": [], "warning": "empty dataset"}

    icl_cache: dict[int, object] = {}

    def icl_for(q):
        if icl_fn is None:
            return None
        if q.id not in icl_cache:
            icl_cache[q.id] = icl_fn(q)
        return icl_cache[q.id]

    params = p.copy()
    flat = params.flatten()
    opt = Adam(cfg.learning_rate)
    history = {"epoch_loss": []}
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.shuffle_seed & 0xFFFFFFFF, epoch, 23)))
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            loss, grad = _batch_loss_grad(params, batch, cfg.temperature,
                                          icl_for, num_candidates, cand_seed)
            epoch_loss += loss * len(batch)
            flat = opt.step(flat, grad)
            params = pol.unflatten(flat, p.layout, p.hidden)
        history["epoch_loss"].append(epoch_loss / len(pairs))
    return params, history


# File format: one record per line, keys always in this order:
# question_id, claims, letter, attempts_used, fallback

def record_to_json(rec: ProcessRecord) -> str:
    return json.dumps({
        "question_id": rec.question_id,
        "claims": list(rec.claims),
        "letter": rec.letter,
        "attempts_used": rec.attempts_used,
        "fallback": rec.fallback,
    })


def write_process_dataset(path, ds: ProcessDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in ds:
            fh.write(record_to_json(rec) + "\n")


def read_process_dataset(path) -> ProcessDataset:
    out = ProcessDataset()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.records.append(ProcessRecord(
                question_id=int(d["question_id"]),
                claims=tuple(int(c) for c in d["claims"]),
                letter=d["letter"],
                attempts_used=int(d["attempts_used"]),
                fallback=bool(d["fallback"]),
            ))
    return out
