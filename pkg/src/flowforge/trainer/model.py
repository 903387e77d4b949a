"""Two-hidden-layer tanh perceptron velocity model with exact reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MLPSpec:
    data_dim: int = 2
    hidden: int = 64

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h = self.data_dim, self.hidden
        return {
            "W1": (d + 1, h), "b1": (h,),
            "W2": (h, h), "b2": (h,),
            "W3": (h, d), "b3": (d,),
        }

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        out, pos = {}, 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            out[name] = flat[pos : pos + size].reshape(shape)
            pos += size
        return out


@dataclass
class ParameterVector:
    values: np.ndarray
    spec: MLPSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {self.values.shape}")

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.spec)

    @classmethod
    def zeros(cls, spec: MLPSpec) -> "ParameterVector":
        return cls(np.zeros(spec.n_params), spec)

    @classmethod
    def init(cls, spec: MLPSpec, seed: int) -> "ParameterVector":
        """Glorot-normal weights, zero biases."""
        rng = np.random.default_rng([seed, 0x1A17])
        flat = np.zeros(spec.n_params)
        views = spec.unpack(flat)
        for name, shape in spec.shapes.items():
            if name.startswith("W"):
                fan_in, fan_out = shape
                views[name][...] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), shape)
        return cls(flat, spec)


def _inputs(x: np.ndarray, t) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (x.shape[0], 1))
    return np.concatenate([x, t], axis=1)


def forward_velocity(params: ParameterVector, x, t, return_cache: bool = False):
    """v_theta(x, t) for a batch x of shape (B, D) and t scalar or (B,)."""
    if not np.all(np.isfinite(params.values)):
        raise FloatingPointError("non-finite parameters")
    p = params.spec.unpack(params.values)
    a0 = _inputs(x, t)
    h1 = np.tanh(a0 @ p["W1"] + p["b1"])
    h2 = np.tanh(h1 @ p["W2"] + p["b2"])
    v = h2 @ p["W3"] + p["b3"]
    if return_cache:
        return v, (a0, h1, h2)
    return v


def backward_velocity(params: ParameterVector, cache, grad_v: np.ndarray) -> np.ndarray:
    """Flat gradient of sum(grad_v * v) wrt the parameters."""
    a0, h1, h2 = cache
    p = params.spec.unpack(params.values)
    grad = np.zeros_like(params.values)
    g = params.spec.unpack(grad)
    g["W3"][...] = h2.T @ grad_v
    g["b3"][...] = grad_v.sum(axis=0)
    d2 = (grad_v @ p["W3"].T) * (1.0 - h2 * h2)
    g["W2"][...] = h1.T @ d2
    g["b2"][...] = d2.sum(axis=0)
    d1 = (d2 @ p["W2"].T) * (1.0 - h1 * h1)
    g["W1"][...] = a0.T @ d1
    g["b1"][...] = d1.sum(axis=0)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return grad


def flow_matching_loss_and_grad(params: ParameterVector, x_t, t, v_target, weights=None):
    """Weighted mean over the batch of per-sample mean-square velocity error."""
    v, cache = forward_velocity(params, x_t, t, return_cache=True)
    err = v - v_target
    per_sample = np.mean(err * err, axis=1)
    b, d = err.shape
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=float)
    loss = float(np.mean(w * per_sample))
    grad_v = (2.0 / (b * d)) * w[:, None] * err
    return loss, backward_velocity(params, cache, grad_v), per_sample
