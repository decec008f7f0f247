from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class SgdState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: SgdState) -> None:
    """One in-place SGD update with momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, g.shape, detail=name)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data -= p.dtype.type(state.lr) * state.velocity[name]


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr=0.01, momentum=0.9, weight_decay=0.0005):
        self.params = dict(params)
        self.state = SgdState(lr=lr, momentum=momentum, weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


def multistep_lr(base_lr: float, epoch: int, milestones, gamma: float = 0.1) -> float:
    """Learning rate after decaying by ``gamma`` at each milestone passed."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)
