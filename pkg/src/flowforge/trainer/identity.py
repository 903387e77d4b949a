"""Toy identity-consistency harness.

Stands in for face detection + recognition: region selectors are coordinate
masks chosen from the ground truth, and the encoder is a frozen seeded random
affine map (a linear map on homogeneous coordinates).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..objectives import RoiExtraction


@dataclass(frozen=True)
class ToyIdentityHarness:
    data_dim: int = 2
    embed_dim: int = 8
    seed: int = 0

    @cached_property
    def weight(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x1D])
        return rng.standard_normal((self.embed_dim, self.data_dim + 1))

    def masks(self, x_gt: np.ndarray) -> np.ndarray:
        """(N, D) selector masks for one ground truth: all coordinates, then the dominant one."""
        dominant = np.zeros(self.data_dim)
        dominant[int(np.argmax(np.abs(x_gt)))] = 1.0
        return np.stack([np.ones(self.data_dim), dominant])

    def encode(self, region: np.ndarray) -> np.ndarray:
        return self.weight @ np.append(region, 1.0)

    def encoder_jacobian(self, region: np.ndarray) -> np.ndarray:
        return self.weight[:, : self.data_dim]

    def roi(self, x_gt) -> RoiExtraction:
        masks = self.masks(np.asarray(x_gt, dtype=float))
        return RoiExtraction(
            transforms=[(lambda x, m=m: m * x) for m in masks],
            encoder=self.encode,
            transform_jacobians=[np.diag(m) for m in masks],
            encoder_jacobian=self.encoder_jacobian,
        )


def batch_identity_loss(harness: ToyIdentityHarness, x_hat: np.ndarray, x_gt: np.ndarray):
    """Per-sample identity loss (B,) and gradient wrt x_hat (B, D), vectorised."""
    b, d = x_hat.shape
    dominant = np.argmax(np.abs(x_gt), axis=1)
    masks = np.ones((b, 2, d))
    masks[:, 1, :] = 0.0
    masks[np.arange(b), 1, dominant] = 1.0
    w_lin, w_bias = harness.weight[:, :d], harness.weight[:, d]
    e_hat = (masks * x_hat[:, None, :]) @ w_lin.T + w_bias  # (B, N, E)
    e_gt = (masks * x_gt[:, None, :]) @ w_lin.T + w_bias
    n_hat = np.linalg.norm(e_hat, axis=2)
    n_gt = np.linalg.norm(e_gt, axis=2)
    if np.any(n_hat == 0) or np.any(n_gt == 0):
        raise ValueError("identity embedding has zero norm")
    cos = np.sum(e_hat * e_gt, axis=2) / (n_hat * n_gt)
    loss = np.mean(1.0 - cos, axis=1)
    g_emb = -(e_gt / (n_hat * n_gt)[..., None] - cos[..., None] * e_hat / (n_hat**2)[..., None])
    grad = np.sum((g_emb @ w_lin) * masks, axis=1) / masks.shape[1]
    return loss, grad
