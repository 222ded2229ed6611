"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: list[Tensor], state: AdamState, lr: float, grads=None) -> None:
    """Update ``params`` in place from their gradients.

    Weight decay shrinks each parameter by ``lr * weight_decay`` before the
    bias-corrected Adam move; it never enters the moment estimates.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ValueError("params, grads and optimizer state differ in length")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {p.name or ''} {p.shape}")
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= dt(lr * state.weight_decay) * p.data
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
