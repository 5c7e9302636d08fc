"""Stochastic gradient descent with Nesterov momentum, global-norm gradient
clipping, and a stall-triggered learning-rate schedule."""

from __future__ import annotations

import numpy as np


class NesterovSgd:
    """v = mu*v + g; w -= lr * (g + mu*v), with optional global-norm clip."""

    def __init__(self, params, lr, momentum=0.9, clip_norm=None):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()

    def grad_norm(self):
        sq = 0.0
        for p in self.params:
            g = p.grad
            sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
        return np.sqrt(sq)

    def step(self):
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        mu = self.momentum
        for p, v in zip(self.params, self.velocity):
            g = p.grad if scale == 1.0 else p.grad * scale
            v *= mu
            v += g
            p.value -= (self.lr * (g + mu * v)).astype(p.value.dtype, copy=False)


class StallSchedule:
    """Multiply lr by ``decay`` after ``patience`` epochs without held-out
    improvement; returns the lr to use next."""

    def __init__(self, lr, decay=0.5, patience=2, min_delta=1e-4):
        self.lr = float(lr)
        self.decay = decay
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.stalled = 0

    def update(self, heldout_loss):
        if heldout_loss < self.best - self.min_delta:
            self.best = heldout_loss
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                self.lr *= self.decay
                self.stalled = 0
        return self.lr
