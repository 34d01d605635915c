"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update.

    ``params`` and ``grads`` are parallel sequences (tensors and arrays);
    moments are keyed by position, so pass them in a stable order.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        dt = p.data.dtype
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m = state.m[i]
        v = state.v[i]
        m *= dt.type(beta1)
        m += dt.type(1.0 - beta1) * g
        v *= dt.type(beta2)
        v += dt.type(1.0 - beta2) * (g * g)
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.data = p.data - dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(eps))


class Adam:
    """Thin wrapper that pairs a :class:`ParamStore` with its Adam state."""

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self):
        params = [p for p in self.store.values() if p.requires_grad]
        adam_step(params, [p.grad for p in params], self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        self.store.zero_grad()
