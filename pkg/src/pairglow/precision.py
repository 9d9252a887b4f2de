"""Global floating-point mode.

Training runs in 32-bit for speed; the verification suite switches to
64-bit so invertibility and Jacobian checks can use tight tolerances.
The mode is process-global: a tape and the tensors recorded on it are
expected to live entirely inside one mode.
"""

from contextlib import contextmanager

import numpy as np

_dtype = np.float32

# When enabled, every op validates its output for NaN/Inf at record time
# (used by the verification suite; too slow for routine training).
strict_checks = False


def dtype():
    """The dtype newly created tensors use."""
    return _dtype


def set_dtype(d):
    global _dtype
    d = np.dtype(d)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {d}; use float32 or float64")
    _dtype = d.type


@contextmanager
def use(d):
    """Temporarily switch the global dtype (used heavily by tests)."""
    global _dtype
    prev = _dtype
    set_dtype(d)
    try:
        yield
    finally:
        _dtype = prev


@contextmanager
def strict(enabled=True):
    global strict_checks
    prev = strict_checks
    strict_checks = enabled
    try:
        yield
    finally:
        strict_checks = prev
