"""Shared helpers for the test suite.

numeric_grad and max_rel_err are written here, independently of the
library's own utilities, so gradient checks always compare two separate
routes to the same number.
"""

import numpy as np


def numeric_grad(fn, x, h=1e-5):
    """Central-difference gradient of the scalar function fn at x."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def max_rel_err(a, b):
    """max |a-b| scaled by the largest magnitude present (floor 1e-12)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)),
                float(np.abs(b).max(initial=0.0)), 1e-12)
    return float(np.abs(a - b).max(initial=0.0)) / denom
