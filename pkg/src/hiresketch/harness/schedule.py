"""Learning-rate schedule and the Adam optimiser."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


def lr_at(epoch: int, base: float = 1e-3, decay: float = 0.65, step: int = 10,
          switch: int = 100, late_decay: float = 0.95, late_step: int = 20) -> float:
    """Step schedule: ``base * decay**(epoch // step)`` up to ``switch``, then
    the slower ``late_decay`` every ``late_step`` epochs from that value."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    if epoch <= switch:
        return base * decay ** (epoch // step)
    return base * decay ** (switch // step) * late_decay ** ((epoch - switch) // late_step)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Update every parameter holding a gradient; parameters without one
        (e.g. an unsampled branch) keep their weights and moments."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
