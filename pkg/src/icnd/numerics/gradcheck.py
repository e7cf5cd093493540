"""Central finite-difference checks for the differentiation engine."""
from __future__ import annotations

import numpy as np


def numeric_grad(fn, param, step=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``param.data``."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = float(np.asarray(fn()))
        flat[i] = old - step
        lo = float(np.asarray(fn()))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def relative_error(a, b):
    """‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, params, step=1e-5):
    """Return the worst relative error between analytic and numeric gradients.

    ``fn`` builds a fresh graph and returns a scalar Tensor on every call.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numeric_grad(lambda: fn().data, p, step)
        worst = max(worst, relative_error(ga, gn))
    return worst
