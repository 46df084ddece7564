"""SGD with classical momentum and a step-decay schedule."""

from __future__ import annotations

import numpy as np


class SGDMomentum:
    """v <- mu*v + g; p <- p - lr*v. Velocities keyed by parameter name."""

    def __init__(self, named_params: dict, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, named_grads: dict):
        for name, p in self.params.items():
            g = named_grads.get(name)
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= (self.lr * v).astype(p.dtype, copy=False)


class StepDecay:
    """Multiply the base lr by `factor` at each epoch in `milestones`."""

    def __init__(self, base_lr: float, milestones, factor: float = 0.1):
        self.base_lr = base_lr
        self.milestones = sorted(milestones)
        self.factor = factor

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.factor ** drops
