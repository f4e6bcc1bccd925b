"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise the numpy
reference implementation takes over with identical semantics. Set
CHAINRFT_BACKEND=reference to force the fallback, or CHAINRFT_BACKEND=compiled
to insist on the extension (raising if the build is missing).
"""

from __future__ import annotations

import os

from . import reference

_requested = os.environ.get("CHAINRFT_BACKEND", "").strip().lower()

BACKEND = "reference"
mlp_scores = reference.mlp_scores
mlp_grad = reference.mlp_grad

if _requested in ("", "compiled", "fast"):
    try:
        from . import _fast  # type: ignore[attr-defined]
        mlp_scores = _fast.mlp_scores
        mlp_grad = _fast.mlp_grad
        BACKEND = "compiled"
    except ImportError:
        if _requested:
            raise ImportError(
                "CHAINRFT_BACKEND requested the compiled kernels but the "
                "extension is not built; reinstall the package or unset the "
                "variable to use the numpy fallback")
elif _requested not in ("reference", "numpy", "python"):
    raise ValueError(f"unknown CHAINRFT_BACKEND value: {_requested!r}")


def backend_name() -> str:
    return BACKEND
