from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_update(params: list[Node], grads: dict[Node, np.ndarray], state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam step. Parameters are rebound to new arrays, never mutated.

    Moments are keyed by position in ``params``, so the list order must be stable.
    """
    state.step += 1
    t = state.step
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.value)
        m = beta1 * state.m.get(i, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(i, 0.0) + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    def __init__(self, params: list[Node], lr: float = 1e-3):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.state = AdamState()

    def step(self, grads: dict[Node, np.ndarray]) -> None:
        adam_update(self.params, grads, self.state, self.lr)
