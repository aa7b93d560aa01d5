"""Classic momentum SGD over named parameters."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import NumericError
from .tensor import Parameter

__all__ = ["SGD"]


class SGD:
    """v <- momentum*v + (grad + wd*p); p <- p - lr*v, one velocity per parameter."""

    def __init__(self, params: Iterable[Parameter], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        ids = [p.pid for p in self.params]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate parameter ids")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {p.pid: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        """Apply one update; refuses to touch anything on a non-finite gradient."""
        live = [p for p in self.params if p.grad is not None]
        for p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {p.pid!r}")
        for p in live:
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[p.pid]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
