"""Euler integration of the learned flow from noise (sigma = 1) to data (sigma = 0)."""

from __future__ import annotations

from functools import partial
from typing import Callable

import numpy as np

from .model import ParameterVector, forward_velocity


def euler_sample(params: ParameterVector, n_samples: int, n_steps: int, seed: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng([seed, 0xE01E])
    x = rng.standard_normal((n_samples, params.spec.data_dim))
    return integrate(params, x, n_steps)


def integrate(velocity: ParameterVector | Callable, x: np.ndarray, n_steps: int) -> np.ndarray:
    """Euler steps sigma = 1, 1 - h, ..., h; ``velocity`` is a model or a callable (x, sigma)."""
    if isinstance(velocity, ParameterVector):
        velocity = partial(forward_velocity, velocity)
    x = np.array(x, dtype=float)
    dsigma = 1.0 / n_steps
    for i in range(n_steps):
        sigma = 1.0 - i * dsigma
        x = x - dsigma * velocity(x, sigma)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite trajectory at Euler step {i}")
    return x
