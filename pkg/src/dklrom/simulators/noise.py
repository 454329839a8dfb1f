"""Measurement corruption for training and evaluation draws."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ValidationError


def add_noise(x: np.ndarray, sigma2: float, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """Additive isotropic Gaussian pixel noise, re-sampled on every call.

    Returns x + N(0, sigma2 I), clipped back to [0, 1] unless `clip=False`
    (the unclipped variant exists so the raw noise statistics can be
    inspected). sigma2 = 0 returns an exact copy without consuming rng draws.
    """
    if sigma2 < 0:
        raise ValidationError("noise variance must be non-negative")
    x = np.asarray(x)
    if sigma2 == 0.0:
        return x.copy()
    noisy = x + rng.normal(0.0, math.sqrt(sigma2), size=x.shape).astype(x.dtype, copy=False)
    if clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    return noisy.astype(x.dtype, copy=False)
