"""Adam with inverse-square-root (Noam) learning-rate schedule."""

from __future__ import annotations

import numpy as np


def noam_lr(step: int, d: int, factor: float, warmup: int) -> float:
    """``factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`` (step counts from 1)."""
    step = max(step, 1)
    return factor * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    def __init__(self, params, d: int, factor: float = 1.0, warmup: int = 400,
                 betas=(0.9, 0.98), eps: float = 1e-9, grad_clip: float | None = 5.0):
        self.params = list(params)
        self.d = d
        self.factor = factor
        self.warmup = warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return noam_lr(self.step_count, self.d, self.factor, self.warmup)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                 for p in self.params if p.grad is not None)))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        self.step_count += 1
        norm = self.grad_norm()
        clip = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            clip = self.grad_clip / (norm + 1e-12)
        lr = self.lr
        t = self.step_count
        c1 = 1 - self.b1 ** t
        c2 = 1 - self.b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * clip
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm
