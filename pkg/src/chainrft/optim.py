"""Adaptive-moment first-order optimizer over flat parameter vectors.

The feature encoding divides claim and candidate values by the task's value
bound, so near-identical candidates sit ~1e-3 apart in feature space and the
scorer needs weights a few orders of magnitude above their init to separate
them. Plain constant-step SGD stalls on that scale; per-parameter moment
scaling (Adam) takes steps bounded by the learning rate regardless of raw
gradient magnitude, which walks there in a few thousand steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One descent step; pass -grad to ascend."""
        if self.m is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return flat - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)

    def snapshot(self) -> tuple:
        return (self.t, None if self.m is None else self.m.copy(),
                None if self.v is None else self.v.copy())

    def restore(self, snap: tuple) -> None:
        self.t, self.m, self.v = snap[0], snap[1], snap[2]
