"""Euler sampling of the learned velocity field with classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import no_grad


class NumericalError(RuntimeError):
    pass


@dataclass
class SampleConfig:
    steps: int = 28
    guidance: float = 2.5
    seed: int = 0
    prompt: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")


def to_latent(images: np.ndarray) -> np.ndarray:
    """Pixel values in [0, 1] -> model space [-1, 1]."""
    return 2.0 * np.asarray(images, dtype=np.float64) - 1.0


def from_latent(z: np.ndarray) -> np.ndarray:
    return np.clip((z + 1.0) / 2.0, 0.0, 1.0)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres (align_corners=False), clamped at the edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize of an (H, W, C) or (H, W) image to ``size`` = (h, w)."""
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0 or image.shape[0] <= 0 or image.shape[1] <= 0:
        raise ValueError(f"resize needs positive extents, got {image.shape[:2]} -> {(h, w)}")
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] == (h, w):
        return img.copy()
    r0, r1, rw = _axis_weights(img.shape[0], h)
    c0, c1, cw = _axis_weights(img.shape[1], w)
    extra = (1,) * (img.ndim - 2)
    rw = rw.reshape((-1, 1) + extra)
    rows = img[r0] * (1.0 - rw) + img[r1] * rw
    cw = cw.reshape((1, -1) + extra)
    return rows[:, c0] * (1.0 - cw) + rows[:, c1] * cw


def euler_integrate(velocity: Callable[[np.ndarray, float], np.ndarray], z: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dz/dt = v from t = 1 down to t = 0 on the uniform grid t_k = k / steps."""
    dt = 1.0 / steps
    for k in range(steps, 0, -1):
        t = k / steps
        v = velocity(z, t)
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite velocity at step {steps - k + 1}/{steps} (t={t:.4f})")
        z = z - dt * v
    return z


def combine_guidance(v_cond: np.ndarray, v_uncond: np.ndarray, g: float) -> np.ndarray:
    # the endpoints are returned as-is: v_u + 1 * (v_c - v_u) is not bit-equal to v_c
    if g == 0.0:
        return np.array(v_uncond, copy=True)
    if g == 1.0:
        return np.array(v_cond, copy=True)
    return v_uncond + g * (v_cond - v_uncond)


def guided_velocity(model, z: np.ndarray, context: np.ndarray, prompt_ids, t, g: float) -> np.ndarray:
    """v_uncond + g (v_cond - v_uncond); the null-prompt pass sees the same context image."""
    if g < 0:
        raise ValueError("guidance must be >= 0")
    ids = np.asarray(prompt_ids, dtype=np.int64)
    with no_grad():
        if g == 1.0:
            return model(z, context, ids, t).data
        v_uncond = model(z, context, np.zeros_like(ids), t).data
        if g == 0.0:
            return v_uncond
        v_cond = model(z, context, ids, t).data
    return combine_guidance(v_cond, v_uncond, g)


def initial_noise(shape: tuple[int, ...], seed: int, index: int = 0) -> np.ndarray:
    """Per-image starting noise, independent of how images are batched."""
    return np.random.default_rng([seed, index]).standard_normal(shape)


def restore_batch(model, degraded: np.ndarray, prompt_ids, steps: int = 28, guidance: float = 2.5,
                  seed: int = 0, indices=None) -> np.ndarray:
    """Restore a batch of model-resolution images (B, S, S, C) in [0, 1]."""
    degraded = np.asarray(degraded, dtype=np.float64)
    b = degraded.shape[0]
    indices = range(b) if indices is None else indices
    ids = np.asarray(prompt_ids, dtype=np.int64).reshape(b, -1)
    context = to_latent(degraded)
    z = np.stack([initial_noise(degraded.shape[1:], seed, int(i)) for i in indices])

    def field(zk, t):
        return guided_velocity(model, zk, context, ids, np.full(b, t), guidance)

    return from_latent(euler_integrate(field, z, steps))


def restore(model, degraded: np.ndarray, prompt: str, cfg: SampleConfig | None = None) -> np.ndarray:
    """Restore one (H, W, C) image of any size; output has the input's resolution."""
    cfg = cfg or SampleConfig(prompt=prompt)
    ids = model.text.vocab.tokenize(prompt)
    s = model.cfg.image_size
    h, w = degraded.shape[:2]
    small = resize(np.asarray(degraded, dtype=np.float64), (s, s))
    out = restore_batch(model, small[None], [ids], cfg.steps, cfg.guidance, cfg.seed)[0]
    return np.clip(resize(out, (h, w)), 0.0, 1.0)
