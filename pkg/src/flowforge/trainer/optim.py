"""AdamW with global-norm clipping and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Learning rate for the 1-based ``step``, ramped linearly from 0."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        """Return updated parameters (decoupled decay applied before the Adam step)."""
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        decayed = params * (1.0 - lr * self.weight_decay)
        return decayed - lr * m_hat / (np.sqrt(v_hat) + self.eps)
