"""Loss kernels and their analytic gradients.

Conventions: x_t = (1 - sigma) * x0 + sigma * eps, target velocity v = eps - x0,
and squared norms are means over vector entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


def softplus(z):
    z = np.asarray(z, dtype=float)
    out = np.logaddexp(0.0, z)
    return float(out) if out.ndim == 0 else out


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def _require_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input to loss kernel")


# --- DPO -----------------------------------------------------------------


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1.0
    omega: float = 1.0
    lambda_sft: float = 0.0
    # flip the regulariser sign to the literal bracket reading (-lambda * L_w)
    literal_sign: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not self.omega >= 1:
            raise ValueError("omega must be >= 1")
        if not self.lambda_sft >= 0:
            raise ValueError("lambda_sft must be >= 0")


@dataclass(frozen=True)
class PreferencePairLosses:
    win_policy: float
    win_ref: float
    lose_policy: float
    lose_ref: float


def _dpo_margin(win_policy, win_ref, lose_policy, lose_ref, config: DpoConfig):
    return config.beta * ((lose_policy - lose_ref) - config.omega * (win_policy - win_ref))


def asymmetric_dpo_loss(pair: PreferencePairLosses, config: DpoConfig) -> float:
    """softplus(-beta * [lose_diff - omega * win_diff]) + lambda * L_w^theta."""
    vals = (pair.win_policy, pair.win_ref, pair.lose_policy, pair.lose_ref)
    _require_finite(*vals)
    z = _dpo_margin(*vals, config)
    sign = -1.0 if config.literal_sign else 1.0
    return softplus(-z) + sign * config.lambda_sft * pair.win_policy


def asymmetric_dpo_batch(win_policy, win_ref, lose_policy, lose_ref, config: DpoConfig):
    """Vectorised loss per pair plus d loss / d L_w^theta and d loss / d L_l^theta."""
    _require_finite(win_policy, win_ref, lose_policy, lose_ref)
    z = _dpo_margin(
        np.asarray(win_policy, float), np.asarray(win_ref, float),
        np.asarray(lose_policy, float), np.asarray(lose_ref, float), config,
    )
    sign = -1.0 if config.literal_sign else 1.0
    loss = np.logaddexp(0.0, -z) + sign * config.lambda_sft * np.asarray(win_policy, float)
    s = sigmoid(-z)  # d softplus(-z) / dz = -sigmoid(-z)
    d_win = s * config.beta * config.omega + sign * config.lambda_sft
    d_lose = -s * config.beta
    return loss, d_win, d_lose


# --- DiffusionNFT --------------------------------------------------------


@dataclass(frozen=True)
class NftConfig:
    beta_guidance: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta_guidance <= 1.0:
            raise ValueError("beta_guidance must lie in (0, 1]")


@dataclass
class NftBatch:
    v_policy: np.ndarray
    v_old: np.ndarray
    v_target: np.ndarray
    reward: float


def implicit_policies(v_policy, v_old, beta: float):
    """v+ = (1 - beta) v_old + beta v,  v- = (1 + beta) v_old - beta v."""
    v_policy, v_old = np.asarray(v_policy, dtype=float), np.asarray(v_old, dtype=float)
    # exact at beta = 1 (v+ = v) and at v = v_old; the reflection through v_old
    # keeps the midpoint within an ulp of v_old
    v_pos = v_policy - (1.0 - beta) * (v_policy - v_old)
    return v_pos, 2.0 * v_old - v_pos


def nft_terms(v_policy, v_old, v_target, reward, config: NftConfig):
    """Per-sample NFT loss and its gradient wrt v_policy.

    Arrays are (..., D); ``reward`` broadcasts over the leading axes.
    """
    v_policy, v_old, v_target = (np.asarray(a, dtype=float) for a in (v_policy, v_old, v_target))
    if not (v_policy.shape == v_old.shape == v_target.shape):
        raise ValueError(
            f"dimensionality mismatch: {v_policy.shape}, {v_old.shape}, {v_target.shape}"
        )
    r = np.asarray(reward, dtype=float)
    if np.any((r < 0) | (r > 1)):
        raise ValueError("reward must lie in [0, 1]")
    beta = config.beta_guidance
    v_pos, v_neg = implicit_policies(v_policy, v_old, beta)
    e_pos, e_neg = v_pos - v_target, v_neg - v_target
    d = v_policy.shape[-1]
    r_ = r[..., None] if r.ndim else r
    loss = r * np.mean(e_pos**2, axis=-1) + (1.0 - r) * np.mean(e_neg**2, axis=-1)
    grad = (2.0 * beta / d) * (r_ * e_pos - (1.0 - r_) * e_neg)
    return loss, grad


def nft_loss(batch: NftBatch, config: NftConfig) -> float:
    """r * ||v+ - v||^2 + (1 - r) * ||v- - v||^2 with v+- the implicit policies around v_old."""
    loss, _ = nft_terms(batch.v_policy, batch.v_old, batch.v_target, batch.reward, config)
    return float(np.mean(loss))


# --- consistency -----------------------------------------------------------


def one_step_denoise(x_t, sigma_t, v_t):
    x_t, v_t = np.asarray(x_t, dtype=float), np.asarray(v_t, dtype=float)
    if x_t.shape != v_t.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {v_t.shape}")
    sigma = np.asarray(sigma_t, dtype=float)
    if sigma.ndim and sigma.ndim < x_t.ndim:
        sigma = sigma[..., None]
    return x_t - sigma * v_t


@dataclass(frozen=True)
class ConsistencyConfig:
    eta: float = 0.0
    sigma_cutoff: float = 0.9

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 < self.sigma_cutoff <= 1.0:
            raise ValueError("sigma_cutoff must lie in (0, 1]")


def identity_weight(sigma, config: ConsistencyConfig):
    """eta * sigma^2 below the cutoff, 0 at or above it."""
    s = np.asarray(sigma, dtype=float)
    w = np.where(s < config.sigma_cutoff, config.eta * s * s, 0.0)
    return float(w) if w.ndim == 0 else w


def total_loss(mse: float, sigma: float, id_loss: float, config: ConsistencyConfig) -> float:
    return mse + identity_weight(sigma, config) * id_loss


Transform = Callable[[np.ndarray], np.ndarray]


@dataclass
class RoiExtraction:
    """Region selectors (built from the ground truth) plus a shared embedding.

    ``transforms[i]`` maps a state to region i; ``transform_jacobians[i]`` (optional)
    is the constant Jacobian of that selector, needed only for gradients.
    ``encoder`` embeds a region; ``encoder_jacobian`` maps a region to d phi / d region.
    """

    transforms: Sequence[Transform]
    encoder: Callable[[np.ndarray], np.ndarray]
    transform_jacobians: Sequence[np.ndarray] | None = None
    encoder_jacobian: Callable[[np.ndarray], np.ndarray] | None = None


def _cosine_distance_and_grad(a: np.ndarray, b: np.ndarray):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("identity embedding has zero norm")
    cos = float(a @ b) / (na * nb)
    # d(1 - cos)/da
    grad_a = -(b / (na * nb) - cos * a / (na * na))
    return 1.0 - cos, grad_a


def identity_loss(x_hat, x_gt, roi: RoiExtraction) -> float:
    """Mean cosine distance between embeddings of matched regions."""
    return identity_loss_and_grad(x_hat, x_gt, roi, need_grad=False)[0]


def identity_loss_and_grad(x_hat, x_gt, roi: RoiExtraction, need_grad: bool = True):
    if len(roi.transforms) < 1:
        raise ValueError("identity loss needs at least one region transform")
    x_hat, x_gt = np.asarray(x_hat, float), np.asarray(x_gt, float)
    total = 0.0
    grad = np.zeros_like(x_hat) if need_grad else None
    for i, transform in enumerate(roi.transforms):
        region = transform(x_hat)
        dist, g_emb = _cosine_distance_and_grad(
            np.asarray(roi.encoder(region), float), np.asarray(roi.encoder(transform(x_gt)), float)
        )
        total += dist
        if need_grad:
            if roi.encoder_jacobian is None or roi.transform_jacobians is None:
                raise ValueError("gradients need transform and encoder Jacobians")
            g_region = roi.encoder_jacobian(region).T @ g_emb
            grad += roi.transform_jacobians[i].T @ g_region
    n = len(roi.transforms)
    return total / n, (grad / n if need_grad else None)
