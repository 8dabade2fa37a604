"""Rectified-flow objective: linear data-to-noise path and velocity regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TimestepSampler:
    """Logit-normal timesteps: t = sigmoid(n), n ~ N(mu, sigma^2)."""

    mu: float = 0.0
    sigma: float = 1.0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("need at least one timestep")
        z = rng.normal(self.mu, self.sigma, size=n)
        t = 1.0 / (1.0 + np.exp(-z))
        # keep strictly inside (0, 1) even for extreme normal draws
        return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def sample_timesteps(n: int, sampler: TimestepSampler, rng: np.random.Generator) -> np.ndarray:
    return sampler.sample(n, rng)


def interpolate(z_clean: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """z_t = (1 - t) z_clean + t eps, with per-sample t broadcast over trailing axes."""
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (z_clean.ndim - 1)) if np.ndim(t) else t
    return (1.0 - t) * z_clean + t * eps


@dataclass
class FlowBatch:
    z_clean: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    z_t: np.ndarray
    v_target: np.ndarray


def make_batch(z_clean: np.ndarray, sampler: TimestepSampler, rng: np.random.Generator, t=None) -> FlowBatch:
    z_clean = np.asarray(z_clean, dtype=np.float64)
    if not np.all(np.isfinite(z_clean)):
        raise ValueError("z_clean contains non-finite values")
    n = z_clean.shape[0]
    t = sampler.sample(n, rng) if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    eps = rng.standard_normal(z_clean.shape)
    return FlowBatch(z_clean, eps, t, interpolate(z_clean, eps, t), eps - z_clean)


def flow_loss(v_pred: Tensor, v_target) -> Tensor:
    """Plain mean squared error over every element."""
    return T.mse(v_pred, v_target)
