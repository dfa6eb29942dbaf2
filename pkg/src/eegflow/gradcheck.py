"""Central finite-difference gradient checks, independent of the tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Node, backward


def numeric_grad(fn: Callable[[], float], value: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d value by central differences; ``value`` is perturbed in place and restored."""
    grad = np.zeros_like(value)
    flat, gflat = value.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max-norms."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def check_gradients(build: Callable[[], Node], params: Sequence[Node], h: float = 1e-5) -> float:
    """Largest relative error over ``params`` between tape and finite differences.

    ``build`` must reconstruct the scalar loss from the current parameter values.
    """
    grads = backward(build())
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: float(build().value), p.value, h)
        ana = grads.get(p, np.zeros_like(p.value))
        worst = max(worst, relative_error(ana, num))
    return worst
