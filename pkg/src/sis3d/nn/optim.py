"""Momentum SGD with step-decayed learning rate."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STAGES = ("rpn", "cls", "mask")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    lr_decay_every: int = 100_000
    lr_decay_factor: float = 0.1
    loss_weights: dict = field(default_factory=lambda: {s: 1.0 for s in STAGES})

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")

    def lr_at(self, step):
        return self.learning_rate * self.lr_decay_factor ** (step // self.lr_decay_every)


def sgd_step(params, grads, state, cfg, step):
    """One momentum update, in place.

    ``v <- momentum * v + grad`` then ``p <- p - lr(step) * v``.  ``state`` maps
    parameter position to its velocity buffer and is created on first use.
    Parameters whose gradient is ``None`` are skipped.
    """
    lr = cfg.lr_at(step)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        data = p.data if hasattr(p, "data") else p
        if g.shape != data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {data.shape}")
        if cfg.momentum == 0:
            data -= lr * g
            continue
        v = state.get(i)
        if v is None:
            v = np.zeros_like(data)
            state[i] = v
        v *= cfg.momentum
        v += g
        data -= lr * v
    return params, state


class SGD:
    def __init__(self, params, cfg=None):
        self.params = list(params)
        self.cfg = cfg or TrainConfig()
        self.state = {}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        sgd_step(self.params, [p.grad for p in self.params], self.state, self.cfg, self.step_count)
        self.step_count += 1
