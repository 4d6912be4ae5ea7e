"""Adam with coupled L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t")}


def adam_step(params: dict, state: AdamState, grads: dict | None = None) -> None:
    """One in-place Adam update of ``params`` (name -> Tensor).

    Gradients come from ``grads`` when given, else from each tensor's
    ``.grad``. Weight decay is added to the gradient before the moment
    updates.
    """
    missing = [n for n, t in params.items() if (grads[n] if grads is not None else t.grad) is None]
    if missing:
        raise ValueError(f"missing gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)
