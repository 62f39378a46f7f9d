"""Forward/reverse diffusion process math, independent of any network.

All operations are pure functions: noise is always supplied by the caller,
never drawn internally, so every stochastic step is replayable and testable
against closed-form oracles. Timesteps are 1-based (t in [1, T]); schedule
tables are stored with index t-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_f64, check_finite

# Endpoints of the reference linear beta schedule at T=1000; shorter schedules
# scale them by 1000/T so the terminal signal level stays comparable.
BETA_START_1000 = 1e-4
BETA_END_1000 = 0.02
DEFAULT_T = 100


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha tables plus the fixed reverse-step sigmas."""

    T: int
    beta_start: float
    beta_end: float
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def _take(self, table: np.ndarray, t) -> np.ndarray | float:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"t={t} outside [1, {self.T}]")
        out = table[t - 1]
        return float(out) if out.ndim == 0 else out

    def beta(self, t):
        return self._take(self.betas, t)

    def alpha(self, t):
        return self._take(self.alphas, t)

    def alpha_bar(self, t):
        return self._take(self.alpha_bars, t)

    def sigma(self, t):
        return self._take(self.sigmas, t)

    def to_meta(self) -> dict:
        """The serialized form; tables are rederived on load, never stored."""
        return {"kind": self.kind, "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end}

    @staticmethod
    def from_meta(meta: dict) -> "NoiseSchedule":
        return make_schedule(meta["T"], meta["beta_start"], meta["beta_end"],
                             kind=meta.get("kind", "linear"))


def make_schedule(T: int = DEFAULT_T, beta_start: float | None = None,
                  beta_end: float | None = None, kind: str = "linear",
                  terminal_check: bool = True) -> NoiseSchedule:
    """Build a linear beta schedule and validate its invariants.

    With endpoints omitted they default to the T=1000 reference values scaled
    by 1000/T, which keeps sqrt(alpha_bar_T) < 0.05 (the terminal latent must
    be near-Gaussian) for the desk-scale default T=100. `terminal_check=False`
    skips only that near-Gaussian bound, for arithmetic probes on toy tables;
    every modeling path uses the default.
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    T = int(T)
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if beta_start is None:
        beta_start = BETA_START_1000 * 1000.0 / T
    if beta_end is None:
        beta_end = BETA_END_1000 * 1000.0 / T
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"require 0 < beta_start <= beta_end < 1, "
                         f"got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    if np.any(np.diff(alpha_bars) >= 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    if terminal_check and np.sqrt(alpha_bars[-1]) >= 0.05:
        raise ValueError(
            f"terminal signal level sqrt(alpha_bar_T)={np.sqrt(alpha_bars[-1]):.4f} "
            f">= 0.05; increase T or the beta range")
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.flags.writeable = False
    return NoiseSchedule(T=T, beta_start=float(beta_start), beta_end=float(beta_end),
                         kind=kind, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, sigmas=sigmas)


def _per_sample(coef, x: np.ndarray) -> np.ndarray | float:
    """Broadcast per-sample scalar coefficients over trailing axes of x."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return float(coef)
    if coef.shape[0] != x.shape[0]:
        raise ValueError(f"per-sample t has length {coef.shape[0]}, "
                         f"but x has batch {x.shape[0]}")
    return coef.reshape((-1,) + (1,) * (x.ndim - 1))


def q_step(x_prev: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One forward noising step: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps."""
    x_prev, eps = as_f64(x_prev, "x_prev"), as_f64(eps, "eps")
    if x_prev.shape != eps.shape:
        raise ValueError(f"shape mismatch: x_prev {x_prev.shape} vs eps {eps.shape}")
    beta = _per_sample(sched.beta(t), x_prev)
    out = np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps
    return check_finite(out, "q_step output")


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal: sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    x0, eps = as_f64(x0, "x0"), as_f64(eps, "eps")
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    abar = _per_sample(sched.alpha_bar(t), x0)
    out = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return check_finite(out, "q_sample output")


def invert_q_sample(x_t: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Exact algebraic inverse of q_sample given the very noise used to make x_t.

    Test oracle: recovers x0 to machine precision at any t.
    """
    x_t, eps = as_f64(x_t, "x_t"), as_f64(eps, "eps")
    abar = _per_sample(sched.alpha_bar(t), x_t)
    return (x_t - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


def posterior_mean(x_t: np.ndarray, t, eps_hat: np.ndarray,
                   sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean: (x_t - beta_t/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t).

    This is the noise-prediction mean used by the sampler. It coincides with
    `invert_q_sample` only at t=1 (where alpha_1 == abar_1); at later steps
    the two deliberately differ.
    """
    x_t, eps_hat = as_f64(x_t, "x_t"), as_f64(eps_hat, "eps_hat")
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    beta = _per_sample(sched.beta(t), x_t)
    alpha = _per_sample(sched.alpha(t), x_t)
    abar = _per_sample(sched.alpha_bar(t), x_t)
    out = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    return check_finite(out, "posterior_mean output")


def p_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
           z: np.ndarray | None, sched: NoiseSchedule) -> np.ndarray:
    """One reverse step: posterior mean plus sigma_t * z; z must be None/0 at t=1."""
    t = int(t)
    mean = posterior_mean(x_t, t, eps_hat, sched)
    if t == 1:
        if z is not None and np.any(np.asarray(z) != 0.0):
            raise ValueError("the final reverse step (t=1) is deterministic; "
                             "z must be None or all zeros")
        return mean
    if z is None:
        raise ValueError(f"z ~ N(0,I) required for reverse step at t={t} > 1")
    z = as_f64(z, "z")
    if z.shape != x_t.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs x_t {x_t.shape}")
    return check_finite(mean + sched.sigma(t) * z, "p_step output")


def ddpm_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Noise-prediction objective: mean squared error over all elements."""
    eps, eps_hat = as_f64(eps, "eps"), as_f64(eps_hat, "eps_hat")
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: eps {eps.shape} vs eps_hat {eps_hat.shape}")
    diff = eps_hat - eps
    return float(np.mean(diff * diff))
