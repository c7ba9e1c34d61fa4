"""SGD with momentum."""
from __future__ import annotations

import numpy as np

from .tensor import AutodiffError, Tensor


class SGD:
    """p <- p - lr * v,  v <- momentum * v + g.

    Momentum buffers live on the optimizer and persist across steps.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9):
        if not lr >= 0:
            raise ValueError("lr must be nonnegative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise AutodiffError(f"missing gradient for {p.name or 'parameter'}")
            if p.grad.shape != p.shape:
                raise AutodiffError(f"gradient shape {p.grad.shape} != {p.shape}")
        for p in self.params:
            v = self._velocity.get(id(p))
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self._velocity[id(p)] = v
            if self.lr:
                p.set_data(p.data - self.lr * v)


def sgd_step(params, lr: float, momentum: float = 0.0, state: dict | None = None) -> dict:
    """Functional single step. Returns the momentum state to pass to the next call."""
    opt = SGD(params, lr, momentum)
    if state:
        opt._velocity = state
    opt.step()
    return opt._velocity
