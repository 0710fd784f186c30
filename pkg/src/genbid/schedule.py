"""Noise-variance schedule and the forward/reverse diffusion primitives.

Steps are 1-indexed: k runs over 1..K, matching the usual algorithm listings.
The helpers work on numpy arrays and torch tensors alike because the schedule
coefficients enter as python floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray        # (K,)
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative products of alpha

    @property
    def K(self) -> int:
        return len(self.beta)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"beta": self.beta}

    def _index(self, k: int) -> int:
        if not 1 <= k <= self.K:
            raise IndexError(f"diffusion step k={k} out of range [1, {self.K}]")
        return k - 1


def build_schedule(K: int, beta_min: float, beta_max: float) -> DiffusionSchedule:
    if K < 1:
        raise ConfigError(f"diffusion steps K must be >= 1, got {K}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"beta bounds must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]")
    if K > 1 and beta_min == beta_max:
        raise ConfigError("linear schedule needs beta_min < beta_max when K > 1")
    beta = np.linspace(beta_min, beta_max, K, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_noise(s0, k: int, eps, sched: DiffusionSchedule):
    """Reparameterized forward sample: sqrt(abar_k)*s0 + sqrt(1-abar_k)*eps."""
    abar = float(sched.alpha_bar[sched._index(k)])
    return math.sqrt(abar) * s0 + math.sqrt(1.0 - abar) * eps


def posterior_step(s_k, eps_hat, k: int, sched: DiffusionSchedule, noise=None):
    """One reverse step: mean from the predicted noise, variance beta_k.

    The terminal step (k=1) is deterministic regardless of ``noise``.
    """
    i = sched._index(k)
    beta = float(sched.beta[i])
    alpha = float(sched.alpha[i])
    abar = float(sched.alpha_bar[i])
    mean = (s_k - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    if k == 1 or noise is None:
        return mean
    return mean + math.sqrt(beta) * noise


def guided_noise(eps_uncond, eps_cond, omega: float):
    """Classifier-free mix: uncond + omega * (cond - uncond)."""
    return eps_uncond + omega * (eps_cond - eps_uncond)
