"""
Upper-level optimizers acting on the (w, Q) pair.

Gradients are supplied by the caller (a hypergradient), so these are plain array
updates over the flattened concatenation of w and Q.
"""
from typing import Optional

import numpy as np

from .core import UpperOptimizerSettings


class UpperOptimizer:
    """Gradient step on (w, Q); subclasses define the direction."""

    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError("Learning rate must be non-negative")
        self.lr = lr
        self.iter = 0

    @staticmethod
    def _flatten(w: np.ndarray, Q: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(w), np.ravel(Q)])

    @staticmethod
    def _split(flat: np.ndarray, w: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return flat[:w.size].reshape(w.shape), flat[w.size:].reshape(Q.shape)

    def direction(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, w: np.ndarray, Q: np.ndarray, d_w: np.ndarray, d_Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Take one descent step.

        Args:
            w: Current weights
            Q: Current transitions
            d_w: ∂F/∂w
            d_Q: ∂F/∂Q

        Returns:
            Unprojected (w, Q)
        """
        g = self._flatten(d_w, d_Q)
        update = self.direction(g)
        self.iter += 1
        return self._split(self._flatten(w, Q) - self.lr * update, w, Q)


class SGD(UpperOptimizer):
    def direction(self, g: np.ndarray) -> np.ndarray:
        return g


class Adam(UpperOptimizer):
    """Adam with bias-corrected moments; coordinates with zero gradient do not move."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None

    def direction(self, g: np.ndarray) -> np.ndarray:
        if self.m is None or self.v is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g ** 2
        t = self.iter + 1
        mhat = self.m / (1 - self.beta1 ** t)
        vhat = self.v / (1 - self.beta2 ** t)
        return mhat / (np.sqrt(vhat) + self.eps)


def make_upper_optimizer(settings: UpperOptimizerSettings) -> UpperOptimizer:
    if settings.name == "adam":
        return Adam(settings.lr, settings.beta1, settings.beta2, settings.eps)
    return SGD(settings.lr)
