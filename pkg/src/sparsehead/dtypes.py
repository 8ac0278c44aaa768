"""Float precision switch.

Everything runs in float32 by default, matching deployment practice. A
process-wide switch to float64 exists so gradient checks can separate
finite-difference noise from actual bugs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

EPS = 1e-5  # variance guard added before sqrt in every normalizer

_default_dtype = np.float32


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"only float32/float64 supported, got {d}")
    global _default_dtype
    _default_dtype = d.type


@contextmanager
def precision(dtype):
    """Temporarily switch the default float width (used by the gradcheck suite)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def as_default(x) -> np.ndarray:
    return np.asarray(x, dtype=default_dtype())
