from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedhbn.nn.layers import ConfigError


@dataclass
class SGD:
    """Classical (heavy-ball) momentum: ``v <- m*v + g; p <- p - lr*v``."""

    lr: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place (the arrays themselves are replaced)."""
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g
            self.velocity[name] = v
            p -= (self.lr * v).astype(p.dtype)

    def reset(self) -> None:
        self.velocity.clear()


def sgd_step(params, grads, optim: SGD):
    optim.step(params, grads)
    return params
