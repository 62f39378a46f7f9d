"""Bias-corrected Adam over in-place (param, grad) array pairs."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError


class Adam:
    """Standard Adam with bias correction.

    Holds references to parameter and gradient arrays (mutated in place).
    Each `step` consumes the accumulated gradients and zeroes them, so the
    usual loop is: zero is implicit, accumulate via backward, call step.
    """

    def __init__(self, params_and_grads, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.pairs = list(params_and_grads)
        for p, g in self.pairs:
            if p.shape != g.shape:
                raise ValueError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p, _ in self.pairs]
        self.v = [np.zeros_like(p) for p, _ in self.pairs]

    def step(self, lr: float | None = None) -> None:
        """Apply one update; `lr` overrides the stored rate (warmup hooks)."""
        eff_lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, (p, g) in enumerate(self.pairs):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient in Adam.step")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p -= eff_lr * m_hat / (np.sqrt(v_hat) + self.eps)
            g[...] = 0.0


def warmup_lr(step: int, lr: float, warmup: int) -> float:
    """Linear warmup: lr * step/warmup for the first `warmup` steps (1-based)."""
    if warmup <= 0 or step > warmup:
        return lr
    return lr * step / warmup
