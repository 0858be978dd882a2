"""Adam with global gradient-norm clipping."""
from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError, Parameter


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict[Parameter, np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        gs = [grads[p] for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in gs)))
        if not np.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm")
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            g = g * factor
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm
