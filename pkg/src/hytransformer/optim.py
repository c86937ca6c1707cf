"""Adam optimizer with bias correction.

Update rule per parameter p with gradient g at step t:

    m <- b1*m + (1-b1)*g
    v <- b2*v + (1-b2)*g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the shared step counter."""

    lr: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def init(self, params: dict[str, Tensor]) -> "AdamState":
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.values)
            self.v[name] = np.zeros_like(p.values)
        return self


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place; returns the advanced state."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.values.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.values -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.values.dtype, copy=False)
    return state


class Adam:
    """Thin stateful wrapper reading grads off the parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.0001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps).init(params)

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
