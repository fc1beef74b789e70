"""Central-difference gradient checking."""

from typing import Callable

import numpy as np


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Estimate d f / d array by perturbing ``array`` in place, one entry at a time."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; 0 when both gradients vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
