"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update.  Returns new parameter arrays; ``state`` is updated in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam: non-finite gradient for {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out, state


class Adam:
    """Adam over a fixed set of named parameter tensors (updated in place)."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in self.params.items()
        }
        new, _ = adam_step({n: p.data for n, p in self.params.items()}, grads, self.state)
        for name, p in self.params.items():
            p.data = new[name]
