"""Synthetic chain-arithmetic questions and their step-by-step decision process.

A question is a short chain of integer operations ("start with 5, add 3,
multiply by 2") presented as a four-option multiple-choice item. An episode
walks the chain one sub-result at a time: at each reasoning step the policy
picks one value out of a small candidate set (exactly one candidate is the
true intermediate), and after the last step it picks an answer letter. Each
action appends one newline-terminated line to the trace, so a finished trace
is parseable with a fixed rule.

The source domain uses additive chains only; the target domain mixes in
multiplication, which is what makes a source-pretrained policy imperfect on
target questions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

OP_KINDS = ("add", "sub", "mul")
LETTERS = ("A", "B", "C", "D")

SOURCE_OP_KINDS = ("add", "sub")
TARGET_OP_KINDS = ("add", "sub", "mul")

_ANSWER_LINE = re.compile(r"Answer: ([A-D])")
_MAX_GENERATE_TRIES = 500


class TaskEnvError(Exception):
    """Base class for environment failures."""


class UnsatisfiableSpecError(TaskEnvError):
    """No value chain fits the spec's value bound after many retries."""


class TransitionError(TaskEnvError):
    """Illegal action for the current state."""


def apply_op(value: int, kind: str, operand: int) -> int:
    if kind == "add":
        return value + operand
    if kind == "sub":
        return value - operand
    if kind == "mul":
        return value * operand
    raise ValueError(f"unknown op kind: {kind!r}")


def chain_values(v0: int, ops: Sequence[tuple[str, int]]) -> list[int]:
    """Intermediate values w_1..w_k of the chain starting at v0."""
    out = []
    w = v0
    for kind, operand in ops:
        w = apply_op(w, kind, operand)
        out.append(w)
    return out


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of one question family."""

    num_steps: int = 3
    op_kinds: tuple[str, ...] = TARGET_OP_KINDS
    operand_range: tuple[int, int] = (2, 9)
    start_range: tuple[int, int] = (0, 20)
    num_options: int = 4
    num_candidates: int = 4
    value_bound: int = 1000
    domain_tag: str = "target"

    def __post_init__(self) -> None:
        if not 1 <= self.num_steps <= 6:
            raise ValueError("num_steps must be in [1, 6]")
        if self.num_options != 4:
            raise ValueError("num_options is fixed at 4")
        if self.num_candidates < 2:
            raise ValueError("num_candidates must be at least 2")
        if not self.op_kinds or any(k not in OP_KINDS for k in self.op_kinds):
            raise ValueError(f"op_kinds must be a nonempty subset of {OP_KINDS}")
        if self.domain_tag not in ("source", "target"):
            raise ValueError("domain_tag must be 'source' or 'target'")
        if self.domain_tag == "source" and "mul" in self.op_kinds:
            raise ValueError("source domain is additive only (add/sub)")
        lo, hi = self.operand_range
        if lo > hi or lo < 2 or hi > 9:
            raise ValueError("operand_range must lie within [2, 9]")


def source_spec(num_steps: int = 3, **kw) -> TaskSpec:
    return TaskSpec(num_steps=num_steps, op_kinds=SOURCE_OP_KINDS,
                    domain_tag="source", **kw)


def target_spec(num_steps: int = 3, **kw) -> TaskSpec:
    return TaskSpec(num_steps=num_steps, op_kinds=TARGET_OP_KINDS,
                    domain_tag="target", **kw)


@dataclass(frozen=True)
class Provenance:
    """Where an augmented question came from."""

    origin_id: int
    variant_index: int
    permutation: tuple[tuple[str, str], ...]  # (original letter, new letter)


@dataclass(frozen=True)
class Question:
    id: int
    text: str
    v0: int
    ops: tuple[tuple[str, int], ...]
    intermediates: tuple[int, ...]
    options: Mapping[str, int]
    gold_letter: str
    domain_tag: str
    provenance: Provenance | None = None

    @property
    def num_steps(self) -> int:
        return len(self.ops)

    @property
    def gold_value(self) -> int:
        return self.intermediates[-1]

    def validate(self, value_bound: int = 1000) -> None:
        if tuple(chain_values(self.v0, self.ops)) != self.intermediates:
            raise TaskEnvError(f"question {self.id}: intermediates do not replay")
        if any(abs(w) > value_bound for w in self.intermediates):
            raise TaskEnvError(f"question {self.id}: value bound exceeded")
        values = [self.options[c] for c in LETTERS]
        if len(set(values)) != len(values):
            raise TaskEnvError(f"question {self.id}: duplicate option values")
        if self.options[self.gold_letter] != self.gold_value:
            raise TaskEnvError(f"question {self.id}: gold letter mismatch")


# Text templates. Index 0 is the canonical rendering used at generation time,
# the rest are the paraphrase pool for augmentation. Every template preserves
# the chain exactly, so rewriting can never change the answer.
_OP_WORDS_PLAIN = {"add": "add {n}", "sub": "subtract {n}", "mul": "multiply by {n}"}
_OP_WORDS_IT = {"add": "increase it by {n}", "sub": "decrease it by {n}",
                "mul": "multiply it by {n}"}
_OP_WORDS_RESULT = {"add": "add {n} to the result", "sub": "take {n} away from the result",
                    "mul": "multiply the result by {n}"}

QUESTION_TEMPLATES: tuple[tuple[str, dict[str, str], str], ...] = (
    ("Start with {v0}.", _OP_WORDS_PLAIN, "What is the final value?"),
    ("Begin from {v0}.", _OP_WORDS_IT, "Which value results?"),
    ("A counter reads {v0}.", _OP_WORDS_RESULT, "What does the counter read at the end?"),
    ("Take {v0} as the starting value.", _OP_WORDS_PLAIN, "Give the final result."),
    ("The running total opens at {v0}.", _OP_WORDS_IT, "Where does the total end up?"),
    ("Let x equal {v0}.", _OP_WORDS_PLAIN, "What is x afterwards?"),
    ("You are holding the number {v0}.", _OP_WORDS_RESULT, "What number are you left with?"),
    ("Initialize the value to {v0}.", _OP_WORDS_IT, "Report the closing value."),
)


def render_text(v0: int, ops: Sequence[tuple[str, int]], template_index: int = 0) -> str:
    intro, op_words, outro = QUESTION_TEMPLATES[template_index]
    parts = [intro.format(v0=v0)]
    for kind, operand in ops:
        phrase = op_words[kind].format(n=operand)
        parts.append(f"Then {phrase}.")
    parts.append(outro)
    return " ".join(parts)


def _top_up(pool: list[int], taken: set[int], need: int, center: int, bound: int) -> None:
    """Extend pool with +-1, +-2, ... perturbations of center until large enough."""
    delta = 1
    while len(pool) < need:
        for cand in (center + delta, center - delta):
            if cand not in taken and abs(cand) <= bound and len(pool) < need:
                pool.append(cand)
                taken.add(cand)
        delta += 1


def build_question(v0: int, ops: Sequence[tuple[str, int]], seed: int,
                   qid: int = 0, domain_tag: str = "target",
                   value_bound: int = 1000) -> Question:
    """Assemble a Question around an explicit chain (options seeded by `seed`)."""
    inter = chain_values(v0, ops)
    if any(abs(w) > value_bound for w in inter):
        raise UnsatisfiableSpecError("forced chain exceeds the value bound")
    gold = inter[-1]
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, qid, 17)))

    # Distractors sit near the gold value (plausible arithmetic slips), so
    # option magnitude says nothing about which letter is right. They keep
    # a minimum distance of 2, leaving the gold option strictly nearest to
    # any final value reached through a single off-by-one slip.
    pool = [gold + d for d in range(-9, 10)
            if abs(d) >= 2 and abs(gold + d) <= value_bound]
    picks = [pool[i] for i in rng.permutation(len(pool))[:3]]

    values = [gold, *picks]
    order = rng.permutation(4)
    options = {LETTERS[i]: values[order[i]] for i in range(4)}
    gold_letter = LETTERS[int(np.argmin(order))]  # slot holding values[0]

    q = Question(
        id=qid,
        text=render_text(v0, ops),
        v0=v0,
        ops=tuple((k, int(n)) for k, n in ops),
        intermediates=tuple(inter),
        options=options,
        gold_letter=gold_letter,
        domain_tag=domain_tag,
    )
    q.validate(value_bound)
    return q


def generate_question(spec: TaskSpec, seed: int, qid: int = 0) -> Question:
    """Draw one question from the spec; pure in (spec, seed, qid)."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, qid)))
    lo, hi = spec.operand_range
    s_lo, s_hi = spec.start_range
    kinds = sorted(spec.op_kinds, key=OP_KINDS.index)
    for _ in range(_MAX_GENERATE_TRIES):
        v0 = int(rng.integers(s_lo, s_hi + 1))
        ops = [(kinds[int(rng.integers(len(kinds)))], int(rng.integers(lo, hi + 1)))
               for _ in range(spec.num_steps)]
        if all(abs(w) <= spec.value_bound for w in chain_values(v0, ops)):
            return build_question(v0, ops, seed=int(rng.integers(2**31)), qid=qid,
                                  domain_tag=spec.domain_tag,
                                  value_bound=spec.value_bound)
    raise UnsatisfiableSpecError(
        f"no chain within |value| <= {spec.value_bound} after {_MAX_GENERATE_TRIES} tries")


@dataclass(frozen=True)
class CandidateSet:
    """Offered values for one reasoning step; exactly one is the true sub-result."""

    step_index: int
    candidates: tuple[int, ...]


def candidate_steps(q: Question, t: int, seed: int, num_candidates: int = 4) -> CandidateSet:
    """Candidate values for step t (1-based); contains w_t exactly once.

    Distractors are single-fault corruptions of the step: a wrong op kind
    applied to w_{t-1}, an off-by-one operand, or plain reuse of w_{t-1}.
    The order is a seeded shuffle so the position of w_t carries nothing.
    """
    k = q.num_steps
    if not 1 <= t <= k:
        raise TaskEnvError(f"step index {t} outside [1, {k}]")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, q.id, t)))
    prev = q.v0 if t == 1 else q.intermediates[t - 2]
    kind, operand = q.ops[t - 1]
    gold = q.intermediates[t - 1]

    pool: list[int] = []
    taken = {gold}
    faults = [apply_op(prev, alt, operand) for alt in OP_KINDS if alt != kind]
    faults += [apply_op(prev, kind, operand + d) for d in (-1, 1)]
    faults.append(prev)
    for v in faults:
        if v not in taken:
            pool.append(v)
            taken.add(v)
    _top_up(pool, taken, num_candidates - 1, gold, bound=10**9)
    picks = [pool[i] for i in rng.permutation(len(pool))[:num_candidates - 1]]

    values = [gold, *picks]
    order = rng.permutation(num_candidates)
    return CandidateSet(step_index=t, candidates=tuple(values[i] for i in order))


@dataclass(frozen=True)
class AnswerStage:
    """The final action: pick a letter. Values mirror the option map."""

    letters: tuple[str, ...]
    values: tuple[int, ...]


def answer_stage(q: Question) -> AnswerStage:
    return AnswerStage(letters=LETTERS, values=tuple(q.options[c] for c in LETTERS))


@dataclass(frozen=True)
class MdpState:
    """Reasoning in progress: chosen sub-results plus the rendered trace."""

    question_id: int
    step_index: int
    claims: tuple[int, ...]
    final_letter: str | None
    trace_text: str

    @property
    def is_terminal(self) -> bool:
        return self.final_letter is not None

    def current_claim(self, q: Question) -> int:
        return self.claims[-1] if self.claims else q.v0


def initial_state(q: Question) -> MdpState:
    return MdpState(question_id=q.id, step_index=0, claims=(),
                    final_letter=None, trace_text="")


def transition(s: MdpState, a: int | str,
               candidates: CandidateSet | None = None) -> MdpState:
    """Apply one action, returning a new state (the input state is untouched)."""
    if s.is_terminal:
        raise TransitionError("transition on terminal state")
    if isinstance(a, str):
        if a not in LETTERS:
            raise TransitionError(f"final answer must be one of {LETTERS}, got {a!r}")
        return MdpState(
            question_id=s.question_id,
            step_index=s.step_index + 1,
            claims=s.claims,
            final_letter=a,
            trace_text=s.trace_text + f"Answer: {a}\n",
        )
    value = int(a)
    if candidates is not None and value not in candidates.candidates:
        raise TransitionError(f"action {value} not in the offered candidate set")
    return MdpState(
        question_id=s.question_id,
        step_index=s.step_index + 1,
        claims=s.claims + (value,),
        final_letter=None,
        trace_text=s.trace_text + f"Step {s.step_index + 1}: {value}\n",
    )


def replay(q: Question, claims: Iterable[int], letter: str | None) -> MdpState:
    """Run a recorded action sequence from the initial state."""
    s = initial_state(q)
    for c in claims:
        s = transition(s, int(c))
    if letter is not None:
        s = transition(s, letter)
    return s


def serialize_trace(q: Question, s: MdpState) -> str:
    return q.text + "\n" + s.trace_text


def extract_letter(text: str) -> str | None:
    """Letter of the last line matching 'Answer: <letter>' exactly, else None."""
    found = None
    for line in text.splitlines():
        m = _ANSWER_LINE.fullmatch(line)
        if m:
            found = m.group(1)
    return found


# Dataset file format: one JSON object per line with keys in this exact order.
# id, text, v0, ops, options, gold_letter, domain_tag [, provenance]

def question_to_record(q: Question) -> dict:
    rec = {
        "id": q.id,
        "text": q.text,
        "v0": q.v0,
        "ops": [[k, n] for k, n in q.ops],
        "options": {c: q.options[c] for c in LETTERS},
        "gold_letter": q.gold_letter,
        "domain_tag": q.domain_tag,
    }
    if q.provenance is not None:
        rec["provenance"] = {
            "origin_id": q.provenance.origin_id,
            "variant_index": q.provenance.variant_index,
            "permutation": {a: b for a, b in q.provenance.permutation},
        }
    return rec


def question_from_record(rec: Mapping) -> Question:
    ops = tuple((k, int(n)) for k, n in rec["ops"])
    prov = None
    if "provenance" in rec:
        p = rec["provenance"]
        prov = Provenance(origin_id=int(p["origin_id"]),
                          variant_index=int(p["variant_index"]),
                          permutation=tuple(sorted(p["permutation"].items())))
    q = Question(
        id=int(rec["id"]),
        text=rec["text"],
        v0=int(rec["v0"]),
        ops=ops,
        intermediates=tuple(chain_values(int(rec["v0"]), ops)),
        options={c: int(v) for c, v in rec["options"].items()},
        gold_letter=rec["gold_letter"],
        domain_tag=rec["domain_tag"],
        provenance=prov,
    )
    q.validate()
    return q


def write_questions(path, questions: Iterable[Question]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(question_to_record(q), separators=(", ", ": ")) + "\n")


def read_questions(path) -> list[Question]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(question_from_record(json.loads(line)))
    return out


def generate_dataset(spec: TaskSpec, size: int, seed: int, id_base: int = 0) -> list[Question]:
    """A list of questions with ids id_base..id_base+size-1."""
    return [generate_question(spec, seed=seed, qid=id_base + i) for i in range(size)]
