"""Numpy reference implementation of the two hot kernels.

Both the step scorer and the value head are the same shape of network:
x -> tanh(W1 x + b1) -> w2 . h + b2. Everything the trainers need reduces to
two primitives over a row matrix X:

  mlp_scores: the forward scores, one per row.
  mlp_grad:   the gradient of sum_i coeff[i] * score(X[i]) w.r.t. the
              parameters, accumulated over rows.

Policy-gradient, SFT, and value-regression gradients all fit the second form
with an appropriate coeff vector, so the compiled extension only has to match
these two functions.
"""

from __future__ import annotations

import numpy as np


def mlp_scores(W1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float,
               X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    h = np.tanh(X @ W1.T + b1)
    return h @ w2 + b2


def mlp_grad(W1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float,
             X: np.ndarray, coeff: np.ndarray):
    """Gradient of sum_i coeff[i] * score(X[i]) in (gW1, gb1, gw2, gb2) form."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    coeff = np.asarray(coeff, dtype=np.float64)
    h = np.tanh(X @ W1.T + b1)
    gw2 = h.T @ coeff
    gb2 = float(coeff.sum())
    back = (coeff[:, None] * (1.0 - h * h)) * w2[None, :]
    gW1 = back.T @ X
    gb1 = back.sum(axis=0)
    return gW1, gb1, gw2, gb2
