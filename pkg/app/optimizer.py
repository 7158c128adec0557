"""Adaptive-moment optimizer over named parameter arrays whose rows can grow and shrink."""

import logging
from typing import Dict, Mapping, Optional

import numpy as np

from app.errors import InvalidArgumentError

logger = logging.getLogger(__name__)


class Adam:
    """Adam with one learning rate per named group.

    Moment arrays are row-co-indexed with their parameter arrays; `extend` and `select`
    keep them aligned when the map gains or loses primitives.
    """

    def __init__(
        self,
        learning_rates: Mapping[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-15,
    ):
        self.lr: Dict[str, float] = dict(learning_rates)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def _ensure(self, name: str, shape) -> None:
        if name not in self.lr:
            raise InvalidArgumentError(f"No learning rate for parameter group '{name}'")
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.t[name] = 0
        elif self.m[name].shape != tuple(shape):
            raise InvalidArgumentError(
                f"Optimizer state of '{name}' has shape {self.m[name].shape}, parameter has {tuple(shape)}"
            )

    def update(self, name: str, grad: np.ndarray) -> np.ndarray:
        """Advance the moments of one group and return the additive parameter update."""
        self._ensure(name, grad.shape)
        self.t[name] += 1
        t = self.t[name]
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        return -(self.lr[name] / bc1) * m / (np.sqrt(v / bc2) + self.epsilon)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """In-place update of every parameter array that has a gradient."""
        for name, grad in grads.items():
            if name not in params:
                continue
            params[name] += self.update(name, grad)

    def extend(self, count: int) -> None:
        """Append zeroed moment rows for `count` new primitives."""
        for name in self.m:
            pad = np.zeros((count,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad.copy()])

    def select(self, index: np.ndarray) -> None:
        """Keep only the given rows (boolean mask or integer index) of every moment array."""
        for name in self.m:
            self.m[name] = self.m[name][index]
            self.v[name] = self.v[name][index]

    def rows(self, name: str) -> Optional[int]:
        return None if name not in self.m else len(self.m[name])

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.t.clear()
