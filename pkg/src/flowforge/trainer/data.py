"""Planar Gaussian-mixture data with labelled modes, plus the toy reward."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class SyntheticDataset:
    n_modes: int = 8
    radius: float = 10.0
    std: float = 0.5
    n_samples: int = 8192
    seed: int = 0

    def __post_init__(self):
        if self.n_modes < 2:
            raise ValueError("need at least 2 modes")

    @cached_property
    def centers(self) -> np.ndarray:
        # half-step offset keeps every mode strictly in the left or right half-plane
        angles = 2.0 * np.pi * (np.arange(self.n_modes) + 0.5) / self.n_modes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    @cached_property
    def _draw(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, 0xDA7A])
        labels = rng.integers(self.n_modes, size=self.n_samples)
        x = self.centers[labels] + self.std * rng.standard_normal((self.n_samples, 2))
        return x, labels

    @property
    def x(self) -> np.ndarray:
        return self._draw[0]

    @property
    def labels(self) -> np.ndarray:
        return self._draw[1]

    def right_modes(self) -> np.ndarray:
        return np.flatnonzero(self.centers[:, 0] > 0)

    def mask(self, modes) -> np.ndarray:
        return np.isin(self.labels, np.asarray(modes))

    def mirror(self, mode: int) -> int:
        """Mode reflected across the vertical axis."""
        reflected = self.centers[mode] * np.array([-1.0, 1.0])
        return int(np.argmin(np.linalg.norm(self.centers - reflected, axis=1)))


def right_half_fraction(samples: np.ndarray) -> float:
    return float(np.mean(np.asarray(samples)[:, 0] > 0))


@dataclass(frozen=True)
class TargetRegion:
    """Union of discs of ``radius`` around the target mode centers."""

    centers: np.ndarray
    radius: float = 1.0
    sharpness: float = 5.0


def nft_reward_fn(sample, region: TargetRegion):
    """Logistic of the signed distance to the region boundary (positive inside)."""
    x = np.atleast_2d(np.asarray(sample, dtype=float))
    dist = np.min(np.linalg.norm(x[:, None, :] - region.centers[None], axis=2), axis=1)
    r = 1.0 / (1.0 + np.exp(-region.sharpness * (region.radius - dist)))
    return float(r[0]) if np.ndim(sample) == 1 else r
