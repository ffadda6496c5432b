"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import Tensor
from .errors import ShapeMismatch


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update. Returns new parameter arrays and the advanced state."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeMismatch(f"param shape {p.shape} vs grad shape {g.shape}")
        m = state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        v = state.v[i] = beta2 * state.v[i] + (1 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params.append((p - update).astype(p.dtype))
    return new_params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step(
            [p.data for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for p, arr in zip(self.params, new):
            p.data = arr
