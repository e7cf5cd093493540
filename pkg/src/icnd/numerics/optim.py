from __future__ import annotations

import numpy as np

from ..errors import DimensionError, InvalidInputError, TrainingDivergenceError


def adamw_step(value, grad, m, v, t, lr=1e-3, wd=0.0, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update with decoupled weight decay.

    ``t`` is the 1-based step count. Returns new ``(value, m, v)``; inputs are
    not modified.
    """
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("non-finite gradient")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    value = value * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return value, m, v


class AdamW:
    """Stateful wrapper applying :func:`adamw_step` to a list of params."""

    def __init__(self, params, lr=1e-3, wd=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, wd, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            p.data, self.m[i], self.v[i] = adamw_step(
                p.data, g, self.m[i], self.v[i], self.t,
                lr=self.lr, wd=self.wd, betas=self.betas, eps=self.eps)


def ema_update(teacher, student, momentum):
    """teacher ← momentum·teacher + (1 − momentum)·student, in place."""
    if not 0.0 <= momentum < 1.0:
        raise InvalidInputError(f"momentum must lie in [0, 1), got {momentum}")
    if len(teacher) != len(student):
        raise DimensionError("teacher and student hold different parameter counts")
    for t, s in zip(teacher, student):
        if t.data.shape != s.data.shape:
            raise DimensionError(f"{t.name}: {t.data.shape} vs {s.data.shape}")
        t.data = momentum * t.data + (1.0 - momentum) * s.data
    return teacher
