"""Finite-difference verification of analytic gradients.

The checker perturbs sampled parameter entries with central differences and
compares against the gradients produced by a train-mode forward/backward.
It reports the worst relative error; it never raises on a bad gradient.
"""

from __future__ import annotations

import numpy as np


def grad_check(model, x: np.ndarray, loss, h: float = 1e-5,
               max_samples: int = 16, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and numeric parameter gradients.

    model: exposes forward(x, train), backward(grad_out), zero_grad(),
        param_items() yielding (name, param, grad).
    loss: maps the model output to (scalar, d_scalar/d_output).
    h: central-difference step, sensible range [1e-6, 1e-4].
    max_samples: entries checked per parameter tensor (all if fewer).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"h={h} outside [1e-6, 1e-4]")
    if rng is None:
        rng = np.random.default_rng(0)

    model.zero_grad()
    out = model.forward(x, train=True)
    _, grad_out = loss(out)
    model.backward(grad_out)

    # Numeric probes must evaluate the same function the analytic pass
    # differentiated, i.e. train mode (batch-norm uses batch statistics there).
    def loss_value() -> float:
        value, _ = loss(model.forward(x, train=True))
        return value

    worst = 0.0
    for _, param, grad in model.param_items():
        flat_p = param.reshape(-1)
        flat_g = grad.reshape(-1)
        n = flat_p.size
        idx = np.arange(n) if n <= max_samples else rng.choice(n, size=max_samples, replace=False)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_value()
            flat_p[i] = orig - h
            down = loss_value()
            flat_p[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = flat_g[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def mse_loss(target: np.ndarray):
    """Loss factory for grad_check: mean squared error against a fixed target."""
    def fn(out: np.ndarray):
        diff = out - target
        value = float(np.mean(diff * diff))
        return value, 2.0 * diff / diff.size
    return fn
