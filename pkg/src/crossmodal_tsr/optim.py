"""SGD with momentum and decoupled-by-exclusion weight decay."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


class SgdMomentum:
    """v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.

    One zero-initialized velocity buffer per parameter, keyed by name.
    Weight decay can be masked off per parameter (kappa, norm gains/biases).
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if momentum < 0 or weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], decay_mask=None) -> None:
        """Apply one update to every parameter that has a gradient.

        ``decay_mask`` maps name -> bool; False disables weight decay for
        that parameter (defaults to decaying everything).
        """
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            wd = self.weight_decay
            if decay_mask is not None and not decay_mask.get(name, True):
                wd = 0.0
            if wd:
                g = g + wd * p.data
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = np.asarray(self.momentum * v + g)
            self.velocity[name] = v
            p.data = np.asarray(p.data - self.lr * v)


def sgd_momentum_step(params, grads, lr, momentum=0.0, weight_decay=0.0,
                      velocities=None):
    """Functional single step over parallel lists; returns velocity buffers.

    Kept as a standalone entry point for tests of the bare update rule; the
    trainer uses :class:`SgdMomentum`.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if velocities is None:
        velocities = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, velocities):
        g = np.asarray(g, dtype=p.data.dtype)
        if weight_decay:
            g = g + weight_decay * p.data
        v *= momentum
        v += g
        p.data = np.asarray(p.data - lr * v)
    return velocities
