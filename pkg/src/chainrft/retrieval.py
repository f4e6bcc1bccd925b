"""Hashed bag-of-tokens embeddings and the exemplar retrieval store.

Texts are tokenized into lowercase [a-z0-9]+ runs; each token lands in one of
D buckets via blake2b (stable across processes, unlike Python's own string
hash), counts are accumulated and L2-normalized. Retrieval is a full cosine
scan: at hundreds of exemplars an index structure would only add moving
parts. The top-k hits are summarized into a fixed-length context block that
the policy's feature vector carries.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .taskenv import Question

_TOKEN = re.compile(r"[a-z0-9]+")


def token_bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


def embed(text: str, dim: int = 64) -> np.ndarray:
    vec = np.zeros(dim)
    for token in _TOKEN.findall(text.lower()):
        vec[token_bucket(token, dim)] += 1.0
    norm = float(np.linalg.norm(vec))
    if norm > 0:
        vec /= norm
    return vec


@dataclass(frozen=True)
class IndexEntry:
    sample_id: int
    vector: np.ndarray
    question_text: str
    answer_value: int


@dataclass
class RetrievalIndex:
    dim: int
    entries: list[IndexEntry]

    def __len__(self) -> int:
        return len(self.entries)


def build_index(questions: Sequence[Question], dim: int = 64) -> RetrievalIndex:
    seen = set()
    entries = []
    for q in questions:
        if q.id in seen:
            raise ValueError(f"duplicate sample id {q.id} in index build")
        seen.add(q.id)
        entries.append(IndexEntry(sample_id=q.id, vector=embed(q.text, dim),
                                  question_text=q.text,
                                  answer_value=q.options[q.gold_letter]))
    return RetrievalIndex(dim=dim, entries=entries)


def retrieve(idx: RetrievalIndex, query_text: str, k: int = 3,
             exclude_id: int | None = None) -> list[tuple[int, float]]:
    """Top-k (sample_id, cosine) pairs; ties broken by ascending sample_id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    qv = embed(query_text, idx.dim)
    scored = [(e.sample_id, float(e.vector @ qv)) for e in idx.entries
              if e.sample_id != exclude_id]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def entries_by_id(idx: RetrievalIndex, ids: Sequence[int]) -> list[IndexEntry]:
    lookup = {e.sample_id: e for e in idx.entries}
    return [lookup[i] for i in ids]


@dataclass(frozen=True)
class ContextBlock:
    """Fixed-length exemplar summary: mean embedding + sorted answer slots."""

    vector: np.ndarray


def icl_context(entries: Sequence[IndexEntry], dim: int = 64,
                max_slots: int = 3, value_bound: int = 1000) -> ContextBlock:
    vec = np.zeros(dim + max_slots)
    if entries:
        vec[:dim] = np.mean([e.vector for e in entries], axis=0)
        answers = sorted(e.answer_value for e in entries)[:max_slots]
        for i, a in enumerate(answers):
            vec[dim + i] = a / value_bound
    return ContextBlock(vector=np.clip(vec, -1.0, 1.0))


def make_icl_fn(idx: RetrievalIndex, k: int = 3, exclude_self: bool = True,
                max_slots: int | None = None):
    """Question -> ContextBlock lookup used to condition the policy.

    During training the query's own entry is excluded so the block never
    leaks the queried question's answer; at test time ids are disjoint from
    the index and the exclusion is inert.
    """
    if max_slots is None:
        max_slots = k
    cache: dict[int, ContextBlock] = {}  # question ids are globally unique

    def icl_fn(q: Question) -> ContextBlock:
        block = cache.get(q.id)
        if block is None:
            hits = retrieve(idx, q.text, k,
                            exclude_id=q.id if exclude_self else None)
            block = icl_context(entries_by_id(idx, [h[0] for h in hits]),
                                idx.dim, max_slots)
            cache[q.id] = block
        return block

    return icl_fn
