"""Question augmentation: surface rewrites plus independent option shuffles.

Each variant re-renders the same op chain through a different sentence
template and permutes the option letters, relabeling the gold letter through
the permutation. Numeric content never changes, so a variant is exactly as
solvable as its origin. Variant ids live in a reserved range so they can
never collide with original train or test ids.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .taskenv import (LETTERS, QUESTION_TEMPLATES, Provenance, Question,
                      render_text)

VARIANT_ID_BASE = 1_000_000
_VARIANTS_PER_ORIGIN = 100  # id stride per origin; bounds n_variants


@dataclass(frozen=True)
class AugmentConfig:
    n_variants: int = 5
    shuffle_seed: int = 0
    rewriter: str = "template"
    # probability of bumping one distractor value per variant, emulating a
    # rewriter that occasionally corrupts numeric content
    corruption_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.n_variants < 0:
            raise ValueError("n_variants must be nonnegative")
        if self.rewriter != "template":
            raise ValueError("only the template rewriter is available")
        if self.n_variants + 1 > len(QUESTION_TEMPLATES):
            raise ValueError(
                f"template pool has {len(QUESTION_TEMPLATES)} entries, too few "
                f"for {self.n_variants} variants plus the original")
        if self.n_variants >= _VARIANTS_PER_ORIGIN:
            raise ValueError("n_variants exceeds the reserved id stride")
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ValueError("corruption_prob must lie in [0, 1]")


def variant_id(origin_id: int, variant_index: int) -> int:
    return VARIANT_ID_BASE + origin_id * _VARIANTS_PER_ORIGIN + variant_index


def augment_question(q: Question, cfg: AugmentConfig, seed: int) -> list[Question]:
    """n_variants rewritten copies of q; the original is not included."""
    out = []
    for v in range(1, cfg.n_variants + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence((seed & 0xFFFFFFFF, cfg.shuffle_seed,
                                    q.id, v, 5)))
        perm = rng.permutation(4)
        # letter mapping: original letter i goes to slot perm[i]
        mapping = {LETTERS[i]: LETTERS[int(perm[i])] for i in range(4)}
        options = {mapping[c]: q.options[c] for c in LETTERS}
        options = {c: options[c] for c in LETTERS}  # canonical key order
        if cfg.corruption_prob > 0 and rng.random() < cfg.corruption_prob:
            options = _corrupt_one_distractor(options, mapping[q.gold_letter], rng)
        out.append(replace(
            q,
            id=variant_id(q.id, v),
            text=render_text(q.v0, q.ops, template_index=v),
            options=options,
            gold_letter=mapping[q.gold_letter],
            provenance=Provenance(origin_id=q.id, variant_index=v,
                                  permutation=tuple(sorted(mapping.items()))),
        ))
    return out


def _corrupt_one_distractor(options, gold_letter, rng):
    letters = [c for c in LETTERS if c != gold_letter]
    pick = letters[int(rng.integers(len(letters)))]
    out = dict(options)
    bump = 1
    while out[pick] + bump in out.values():
        bump += 1
    out[pick] = out[pick] + bump
    return out


def augment_dataset(questions: Sequence[Question], cfg: AugmentConfig,
                    seed: int) -> list[Question]:
    """Originals plus their variants, origin-major order."""
    pool = []
    for q in questions:
        pool.append(q)
        pool.extend(augment_question(q, cfg, seed))
    return pool
