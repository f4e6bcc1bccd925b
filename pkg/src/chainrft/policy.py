"""Step-scoring policy with a value head.

Two tiny two-layer tanh networks share one feature encoding: the scorer rates
a single (state, candidate) pair, and softmax over the offered candidates at
a temperature gives the action distribution; the value head reads the state
encoding alone (candidate slot zeroed). Answer-stage actions (the A-D letters)
are scored through the same scorer, with the option values standing in as
candidates.

All gradients are analytic, flow through the kernel backend, and are reported
as flat vectors in a fixed block order so optimizers can treat parameters as
one array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .taskenv import OP_KINDS, AnswerStage, CandidateSet, MdpState, Question

DEFAULT_TEMPERATURE = 0.6


class NumericError(RuntimeError):
    """Non-finite values reached the policy; names the offending blocks."""

    def __init__(self, message: str, blocks: tuple[str, ...] = ()):
        super().__init__(message)
        self.blocks = blocks


@dataclass(frozen=True)
class FeatureLayout:
    """Positions and widths of the feature vector slots.

    [0] current claim / value_bound
    [1] candidate value / value_bound
    [2:5] one-hot op kind for the upcoming step (zeros at the answer stage)
    [5] operand / 10 (zero at the answer stage)
    [6] step progress: state step index / k
    [7] claim * operand / (10 * value_bound), an interaction term; without
        it a multiplicative step check needs a bilinear unit the scorer
        cannot express at this input scale
    [8:8+embed_dim] retrieved-context mean embedding (zeros when absent)
    [8+embed_dim:] retrieved exemplar answers / value_bound, zero padded

    Every slot lands in [-1, 1]; out-of-range candidate values are clipped,
    which only saturates distractors that are already far from plausible.
    """

    embed_dim: int = 64
    icl_slots: int = 3
    value_bound: int = 1000

    BASE: int = field(default=8, init=False, repr=False)

    @property
    def total_dim(self) -> int:
        return self.BASE + self.embed_dim + self.icl_slots


DEFAULT_LAYOUT = FeatureLayout()

# Flat-vector block order. The value head reuses the scorer's input width
# with the candidate slot zeroed, so both halves share one layout.
_BLOCKS = ("scorer.W1", "scorer.b1", "scorer.w2", "scorer.b2",
           "value.W1", "value.b1", "value.w2", "value.b2")


@dataclass
class PolicyParams:
    layout: FeatureLayout
    hidden: int
    W1: np.ndarray  # (H, F) scorer input weights
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: float
    V1: np.ndarray  # (H, F) value-head input weights
    c1: np.ndarray  # (H,)
    v2: np.ndarray  # (H,)
    c2: float

    @property
    def num_params(self) -> int:
        f, h = self.layout.total_dim, self.hidden
        return 2 * (h * f + h + h + 1)

    def block_arrays(self) -> tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.w2, np.array([self.b2]),
                self.V1, self.c1, self.v2, np.array([self.c2]))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.block_arrays()])

    def check_finite(self) -> None:
        bad = tuple(name for name, a in zip(_BLOCKS, self.block_arrays())
                    if not np.all(np.isfinite(a)))
        if bad:
            raise NumericError(f"non-finite parameters in blocks: {', '.join(bad)}",
                               blocks=bad)

    def copy(self) -> "PolicyParams":
        return unflatten(self.flatten(), self.layout, self.hidden)


def init_params(seed: int, layout: FeatureLayout = DEFAULT_LAYOUT,
                hidden: int = 32) -> PolicyParams:
    """Fresh parameters, uniform in [-0.05, 0.05]."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, 101)))
    f = layout.total_dim

    def u(*shape):
        return rng.uniform(-0.05, 0.05, size=shape)

    return PolicyParams(layout=layout, hidden=hidden,
                        W1=u(hidden, f), b1=u(hidden), w2=u(hidden), b2=float(u()),
                        V1=u(hidden, f), c1=u(hidden), v2=u(hidden), c2=float(u()))


def unflatten(flat: np.ndarray, layout: FeatureLayout, hidden: int) -> PolicyParams:
    f, h = layout.total_dim, hidden
    sizes = [h * f, h, h, 1, h * f, h, h, 1]
    if flat.shape != (sum(sizes),):
        raise ValueError(f"flat vector has {flat.shape}, expected ({sum(sizes)},)")
    parts = np.split(np.asarray(flat, dtype=np.float64), np.cumsum(sizes)[:-1])
    return PolicyParams(
        layout=layout, hidden=h,
        W1=parts[0].reshape(h, f).copy(), b1=parts[1].copy(),
        w2=parts[2].copy(), b2=float(parts[3][0]),
        V1=parts[4].reshape(h, f).copy(), c1=parts[5].copy(),
        v2=parts[6].copy(), c2=float(parts[7][0]),
    )


def _icl_vector(icl, layout: FeatureLayout) -> np.ndarray | None:
    if icl is None:
        return None
    vec = np.asarray(getattr(icl, "vector", icl), dtype=np.float64)
    want = layout.embed_dim + layout.icl_slots
    if vec.shape != (want,):
        raise ValueError(f"context block has shape {vec.shape}, expected ({want},)")
    return vec


def _base_features(q: Question, s: MdpState, icl, layout: FeatureLayout) -> np.ndarray:
    if s.is_terminal:
        raise ValueError("cannot featurize a terminal state")
    vec = np.zeros(layout.total_dim, dtype=np.float64)
    vec[0] = s.current_claim(q) / layout.value_bound
    k = q.num_steps
    if s.step_index < k:
        kind, operand = q.ops[s.step_index]
        vec[2 + OP_KINDS.index(kind)] = 1.0
        vec[5] = operand / 10.0
        vec[7] = s.current_claim(q) * operand / (10.0 * layout.value_bound)
    vec[6] = s.step_index / k
    ctx = _icl_vector(icl, layout)
    if ctx is not None:
        vec[layout.BASE:] = ctx
    return vec


def featurize(q: Question, s: MdpState, cand: int, icl=None,
              layout: FeatureLayout = DEFAULT_LAYOUT) -> np.ndarray:
    vec = _base_features(q, s, icl, layout)
    vec[1] = cand / layout.value_bound
    return np.clip(vec, -1.0, 1.0)


def state_features(q: Question, s: MdpState, icl=None,
                   layout: FeatureLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Feature vector for the value head: candidate slot left at zero."""
    return np.clip(_base_features(q, s, icl, layout), -1.0, 1.0)


def offered_actions(offered: CandidateSet | AnswerStage) -> tuple:
    if isinstance(offered, CandidateSet):
        return offered.candidates
    return offered.letters


def offered_values(offered: CandidateSet | AnswerStage) -> tuple[int, ...]:
    if isinstance(offered, CandidateSet):
        return offered.candidates
    return offered.values


def candidate_features(q: Question, s: MdpState, offered, icl=None,
                       layout: FeatureLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Feature matrix with one row per offered action.

    Answer-stage rows zero the op-kind block even when the state still has
    ops ahead: the block describes the decision being scored, and a letter
    choice has no upcoming op. This keeps answer decisions geometrically
    alike wherever in the chain they are made.
    """
    base = _base_features(q, s, icl, layout)
    if isinstance(offered, AnswerStage):
        base[2:6] = 0.0
        base[7] = 0.0
    values = offered_values(offered)
    X = np.repeat(base[None, :], len(values), axis=0)
    X[:, 1] = np.asarray(values, dtype=np.float64) / layout.value_bound
    return np.clip(X, -1.0, 1.0)


@dataclass
class ActionDistribution:
    actions: tuple
    probs: np.ndarray
    log_probs: np.ndarray
    temperature: float
    features: np.ndarray  # (m, F), row i featurizes actions[i]

    def index_of(self, action) -> int:
        try:
            return self.actions.index(action)
        except ValueError:
            raise KeyError(f"action {action!r} not among {self.actions}") from None

    def prob_of(self, action) -> float:
        return float(self.probs[self.index_of(action)])

    def log_prob_of(self, action) -> float:
        return float(self.log_probs[self.index_of(action)])


def scores_for(p: PolicyParams, X: np.ndarray) -> np.ndarray:
    return _kernels.mlp_scores(p.W1, p.b1, p.w2, p.b2, X)


def values_for(p: PolicyParams, X: np.ndarray) -> np.ndarray:
    return _kernels.mlp_scores(p.V1, p.c1, p.v2, p.c2, X)


def softmax_logits(scores: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max()
    log_probs = z - math.log(np.exp(z).sum())
    return np.exp(log_probs), log_probs


def action_distribution(p: PolicyParams, q: Question, s: MdpState,
                        offered: CandidateSet | AnswerStage,
                        temperature: float = DEFAULT_TEMPERATURE,
                        icl=None) -> ActionDistribution:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    X = candidate_features(q, s, offered, icl, p.layout)
    scores = scores_for(p, X)
    if not np.all(np.isfinite(scores)):
        p.check_finite()  # raises with the offending block names
        raise NumericError("non-finite logits from finite parameters (feature overflow?)")
    probs, log_probs = softmax_logits(scores, temperature)
    return ActionDistribution(actions=offered_actions(offered), probs=probs,
                              log_probs=log_probs, temperature=temperature,
                              features=X)


def sample_action(dist: ActionDistribution, rng) -> tuple[object, float]:
    """Inverse-CDF draw over the stated candidate order."""
    rng = as_generator(rng)
    r = float(rng.random())
    acc = 0.0
    idx = len(dist.actions) - 1  # guard against r landing on accumulated rounding
    for i, pr in enumerate(dist.probs):
        acc += float(pr)
        if r < acc:
            idx = i
            break
    return dist.actions[idx], float(dist.log_probs[idx])


def log_prob(p: PolicyParams, q: Question, s: MdpState, offered, action,
             temperature: float = DEFAULT_TEMPERATURE, icl=None) -> float:
    return action_distribution(p, q, s, offered, temperature, icl).log_prob_of(action)


def value(p: PolicyParams, q: Question, s: MdpState, icl=None) -> float:
    x = state_features(q, s, icl, p.layout)
    out = float(values_for(p, x)[0])
    if not math.isfinite(out):
        p.check_finite()
        raise NumericError("non-finite value output")
    return out


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, np.random.SeedSequence):
        return np.random.default_rng(rng)
    return np.random.default_rng(np.random.SeedSequence(rng))


# Gradient assembly. The scorer and value head occupy disjoint halves of the
# flat vector; each helper fills its half and leaves the other at zero.

def _flat_from_scorer(p: PolicyParams, gW1, gb1, gw2, gb2) -> np.ndarray:
    out = np.zeros(p.num_params)
    h, f = p.hidden, p.layout.total_dim
    n = h * f + 2 * h + 1
    out[:n] = np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])
    return out


def _flat_from_value(p: PolicyParams, gW1, gb1, gw2, gb2) -> np.ndarray:
    out = np.zeros(p.num_params)
    h, f = p.hidden, p.layout.total_dim
    n = h * f + 2 * h + 1
    out[n:] = np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])
    return out


def scorer_grad(p: PolicyParams, X: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_i coeff[i] * scorer(X[i])."""
    return _flat_from_scorer(p, *_kernels.mlp_grad(p.W1, p.b1, p.w2, p.b2, X, coeff))


def value_grad(p: PolicyParams, X: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_i coeff[i] * value(X[i])."""
    return _flat_from_value(p, *_kernels.mlp_grad(p.V1, p.c1, p.v2, p.c2, X, coeff))


def log_prob_coeff(probs: np.ndarray, index: int, temperature: float) -> np.ndarray:
    """Row coefficients turning scorer_grad into grad of log softmax[index]."""
    coeff = -probs / temperature
    coeff[index] += 1.0 / temperature
    return coeff


def grad_log_prob(p: PolicyParams, q: Question, s: MdpState, offered, action,
                  temperature: float = DEFAULT_TEMPERATURE, icl=None) -> np.ndarray:
    dist = action_distribution(p, q, s, offered, temperature, icl)
    idx = dist.index_of(action)
    coeff = log_prob_coeff(dist.probs.copy(), idx, temperature)
    return scorer_grad(p, dist.features, coeff)


def grad_value(p: PolicyParams, q: Question, s: MdpState, icl=None) -> np.ndarray:
    x = state_features(q, s, icl, p.layout)
    return value_grad(p, x[None, :], np.ones(1))


# Checkpoint format (decimal text, line oriented):
#   chainrft-policy v1
#   embed_dim <D> / icl_slots <k> / value_bound <B> / hidden <H> / params <n>
#   one float.hex() per line in flatten() order
# float.hex round-trips doubles bit-exactly and stays endian-neutral.

_MAGIC = "chainrft-policy v1"


def save_params(path, p: PolicyParams) -> None:
    flat = p.flatten()
    lo = p.layout
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"embed_dim {lo.embed_dim}\n")
        fh.write(f"icl_slots {lo.icl_slots}\n")
        fh.write(f"value_bound {lo.value_bound}\n")
        fh.write(f"hidden {p.hidden}\n")
        fh.write(f"params {flat.size}\n")
        for x in flat:
            fh.write(float(x).hex() + "\n")


def load_params(path) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint (bad magic)")
    header = {}
    for ln in lines[1:6]:
        key, val = ln.split()
        header[key] = int(val)
    layout = FeatureLayout(embed_dim=header["embed_dim"],
                           icl_slots=header["icl_slots"],
                           value_bound=header["value_bound"])
    hidden = header["hidden"]
    expected = 2 * (hidden * layout.total_dim + 2 * hidden + 1)
    if header["params"] != expected:
        raise ValueError(f"{path}: header claims {header['params']} parameters, "
                         f"dims imply {expected}")
    body = lines[6:]
    if len(body) != expected:
        raise ValueError(f"{path}: {len(body)} parameter lines, expected {expected}")
    flat = np.array([float.fromhex(ln) for ln in body], dtype=np.float64)
    return unflatten(flat, layout, hidden)
