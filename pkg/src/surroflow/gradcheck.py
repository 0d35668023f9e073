"""Finite-difference utilities for verifying hand-written gradients.

Central differences are evaluated with the perturbed values actually stored
in the array, so the effective step survives rounding to float32. The
comparison metric is normwise per tensor: elementwise ratios blow up on
entries whose true gradient is incidentally tiny, while the norm ratio
reflects the accuracy of the tensor as a whole.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def default_step(dtype) -> float:
    """Central-difference step balancing truncation against rounding."""
    return float(np.finfo(np.dtype(dtype)).eps ** (1.0 / 3.0))


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, step: float | None = None) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to ``arr``, in float64.

    ``f`` takes no arguments and must read ``arr`` afresh on every call;
    the array is perturbed in place and restored afterwards.
    """
    if step is None:
        step = default_step(arr.dtype)
    flat = arr.reshape(-1)
    grad = np.zeros(flat.shape[0], dtype=np.float64)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + step
        xp = float(flat[i])
        fp = f()
        flat[i] = orig - step
        xm = float(flat[i])
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (xp - xm)
    return grad.reshape(arr.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative difference ``|a - n| / max(|a|, |n|, 1e-12)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
    return float(np.linalg.norm(a - n)) / denom


def random_probe(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Unit-scale random direction used to reduce an array output to a scalar."""
    probe = rng.standard_normal(shape) / np.sqrt(float(np.prod(shape)))
    return probe.astype(dtype)


def probe_loss(y: np.ndarray, probe: np.ndarray) -> float:
    """Scalar pairing ``<probe, y>``; its gradient with respect to ``y`` is ``probe``."""
    return float(np.vdot(probe.astype(np.float64), y.astype(np.float64)))
