"""Central-difference gradient oracle.

Independent of the tape: used to verify every reverse-mode gradient in the
test suite, including the hand-derived solver adjoints.
"""

from __future__ import annotations

import numpy as np


def finite_difference_gradient(f, x, h: float = 1e-6) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / (2 h) for every coordinate i."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_gradient_error(g, g_ref) -> float:
    """L2 relative error of a gradient against a reference."""
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    g_ref = np.asarray(g_ref, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(g_ref)
    if denom == 0.0:
        return float(np.linalg.norm(g))
    return float(np.linalg.norm(g - g_ref) / denom)
