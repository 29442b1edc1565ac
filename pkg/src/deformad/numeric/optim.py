"""Decoupled-weight-decay adaptive-moment optimizer with cosine annealing."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr, step, total_steps):
    """Cosine-annealed learning rate; step counts from 0 to total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


class AdamW:
    """Holds first/second moment state per parameter tensor.

    Steps with a non-finite gradient are skipped for that tensor and
    counted in ``skipped_updates`` instead of poisoning the parameters.
    """

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-2):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.skipped_updates = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.skipped_updates += 1
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
