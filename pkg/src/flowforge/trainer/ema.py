"""Shadow-weight averaging: constant-decay EMA or the running arithmetic mean."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RUNNING_MEAN = "mean"


@dataclass
class EmaState:
    shadow: np.ndarray
    decay: float | str = 0.999
    updates_seen: int = 0
    # running sum of every params vector seen; mean mode only
    total: np.ndarray | None = None

    def __post_init__(self):
        self.shadow = np.array(self.shadow, dtype=np.float64)
        if self.decay != RUNNING_MEAN and not 0.0 <= float(self.decay) <= 1.0:
            raise ValueError("decay must lie in [0, 1] or be 'mean'")
        if self.decay == RUNNING_MEAN and self.total is None:
            self.total = self.shadow * self.updates_seen

    @classmethod
    def start(cls, params: np.ndarray, decay: float | str = 0.999) -> "EmaState":
        return cls(np.array(params, dtype=np.float64), decay, 0)


def ema_update(state: EmaState, params: np.ndarray) -> EmaState:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != state.shadow.shape:
        raise ValueError(f"length mismatch: {params.shape} vs {state.shadow.shape}")
    n = state.updates_seen + 1
    if state.decay == RUNNING_MEAN:
        # equivalent to decay_t = t / (t + 1), but divides once instead of compounding rounding
        total = state.total + params
        return EmaState(total / n, state.decay, n, total)
    d = float(state.decay)
    return EmaState(d * state.shadow + (1.0 - d) * params, state.decay, n)
