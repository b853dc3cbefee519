"""Central finite differences, the reference the analytic backward is checked against."""
from __future__ import annotations

from typing import Callable

import numpy as np


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - b| / (|a| + |b|)``."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, indices, h: float = 1e-6) -> np.ndarray:
    """d f / d arr[i] for each multi-index ``i``, perturbing ``arr`` in place."""
    out = np.empty(len(indices))
    for j, i in enumerate(indices):
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        out[j] = (fp - fm) / (2.0 * h)
    return out


def sample_indices(shape, rng: np.random.Generator, k: int):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_grads(f: Callable[[], float], arrays: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
                rng: np.random.Generator, per_tensor: int = 6, h: float = 1e-6,
                zero_tol: float = 1e-8) -> dict[str, float]:
    """Relative error per named array over ``per_tensor`` sampled coordinates.

    A tensor whose true gradient vanishes identically (an attention key bias,
    say) gives differences at rounding-noise level; when both estimates are
    below ``zero_tol`` in norm they count as agreeing.
    """
    errors = {}
    for name, arr in arrays.items():
        idx = sample_indices(arr.shape, rng, per_tensor)
        num = numeric_grad(f, arr, idx, h)
        ana = np.array([analytic[name][i] for i in idx])
        if max(np.linalg.norm(num), np.linalg.norm(ana)) < zero_tol:
            errors[name] = 0.0
        else:
            errors[name] = rel_error(num, ana)
    return errors
