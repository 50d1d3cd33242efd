"""Adam update on named numpy parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place update of ``param``."""
        g = grad.astype(np.float64)
        m = self.m.get(name, np.zeros_like(g))
        v = self.v.get(name, np.zeros_like(g))
        t = self.t.get(name, 0) + 1
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * g * g
        self.m[name], self.v[name], self.t[name] = m, v, t
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype)
