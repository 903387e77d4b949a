"""Timestep machinery on the normalised horizon [0, 1), where t = 1 is pure noise.

* distributed stratified sampling: rank r draws uniformly inside one of K
  equidistant sub-intervals, with the rank -> interval map rotated every P steps;
* a progressive curriculum that starts biased towards high noise;
* logit-normal loss weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class StratifiedConfig:
    world_size: int = 1
    rotation_period: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")
        if self.rotation_period < 1:
            raise ValueError("rotation_period must be >= 1")


@dataclass(frozen=True)
class CurriculumSchedule:
    total_steps: int
    bias_exponent_start: float = 3.0
    bias_exponent_end: float = 1.0

    def __post_init__(self):
        if self.bias_exponent_start < 1.0:
            raise ValueError("bias_exponent_start must be >= 1")
        if self.bias_exponent_end != 1.0:
            raise ValueError("the curriculum must end at exponent 1 (uniform)")

    def exponent(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.bias_exponent_end
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        return self.bias_exponent_start + (self.bias_exponent_end - self.bias_exponent_start) * frac


@dataclass(frozen=True)
class WeightConfig:
    loc: float = 0.0
    scale: float = 1.0
    clamp_eps: float = 1e-5

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")


def intervals(k: int) -> list[tuple[float, float]]:
    if k < 1:
        raise ValueError("K must be >= 1")
    return [(i / k, (i + 1) / k) for i in range(k)]


@lru_cache(maxsize=256)
def _latin_factors(seed: int, k: int) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    rng = np.random.default_rng([seed, k, 0x5EED])
    sigma, tau, rho = (tuple(int(v) for v in rng.permutation(k)) for _ in range(3))
    return sigma, tau, rho


def rotation_permutation(config: StratifiedConfig, step: int) -> list[int]:
    """Interval index assigned to each rank at ``step``.

    Epoch e = step // P selects row (e mod K) of a seeded cyclic Latin square
    sigma((tau(r) + rho(e mod K)) mod K): every row is a permutation of the
    intervals, and every rank meets each interval exactly once in any K
    consecutive epochs.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    k = config.world_size
    if k == 1:
        return [0]
    sigma, tau, rho = _latin_factors(config.seed, k)
    offset = rho[(step // config.rotation_period) % k]
    return [sigma[(tau[r] + offset) % k] for r in range(k)]


def _inside(lo: float, hi: float, t):
    # (k + u) / K can round up to hi for u just below 1
    return np.minimum(t, np.nextafter(hi, lo))


def rank_interval(config: StratifiedConfig, rank: int, step: int) -> tuple[float, float]:
    if not 0 <= rank < config.world_size:
        raise ValueError(f"rank {rank} outside [0, {config.world_size})")
    k = config.world_size
    idx = rotation_permutation(config, step)[rank]
    return idx / k, (idx + 1) / k


def draw_timestep(
    config: StratifiedConfig,
    rank: int,
    step: int,
    rng: np.random.Generator,
    size: int | None = None,
    curriculum: CurriculumSchedule | None = None,
):
    """Uniform draw(s) inside the rank's interval at this step.

    With a curriculum, the within-interval position u is replaced by
    u ** (1 / a(step)), biasing every rank towards the noisy end of its interval.
    """
    lo, hi = rank_interval(config, rank, step)
    u = rng.random(size)
    if curriculum is not None:
        u = u ** (1.0 / curriculum.exponent(step))
    t = _inside(lo, hi, lo + (hi - lo) * u)
    return float(t) if size is None else t


def curriculum_draw(
    schedule: CurriculumSchedule, step: int, rng: np.random.Generator, size: int | None = None
):
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    u = rng.random(size)
    t = u ** (1.0 / schedule.exponent(step))
    return float(t) if size is None else t


def logit_normal_weight(t, config: WeightConfig = WeightConfig()):
    """Logit-normal density at t (clamped into [eps, 1 - eps]); scalar or array."""
    tc = np.clip(np.asarray(t, dtype=float), config.clamp_eps, 1.0 - config.clamp_eps)
    z = (np.log(tc) - np.log1p(-tc) - config.loc) / config.scale
    w = np.exp(-0.5 * z * z) / (tc * (1.0 - tc) * config.scale * math.sqrt(2.0 * math.pi))
    return float(w) if w.ndim == 0 else w


def rank_generators(seed: int, world_size: int) -> list[np.random.Generator]:
    """Independent per-rank streams, as each device would own its generator."""
    return [np.random.default_rng([seed, r, 0x7157]) for r in range(world_size)]
