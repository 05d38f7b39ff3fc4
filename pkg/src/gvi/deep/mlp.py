"""Fully connected ReLU network with hand-written reverse mode."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gvi.exceptions import ShapeMismatch


@dataclass
class MlpParams:
    """Weights are stored (fan_in, fan_out) so a layer is ``x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i} expects {w.shape[0]} inputs, previous layer gives "
                                    f"{self.weights[i - 1].shape[1]}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Parameters in a fixed order (W0, b0, W1, b1, ...); views, not copies."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        arrays = list(arrays)
        return cls([np.array(a) for a in arrays[0::2]], [np.array(a) for a in arrays[1::2]])


def init_mlp(input_dim: int, output_dim: int, hidden=(256, 256), rng: np.random.Generator | None = None,
             dtype=np.float32) -> MlpParams:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = [input_dim, *hidden, output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    return MlpParams(weights, biases)


def _check_obs(params: MlpParams, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=params.dtype)
    if obs.ndim != 2 or obs.shape[1] != params.input_dim:
        raise ShapeMismatch(f"expected observations of shape (batch, {params.input_dim}), got {obs.shape}")
    return obs


def forward(params: MlpParams, obs, return_cache: bool = False):
    """q-values for a batch of observations; optionally the layer inputs for :func:`backward`."""
    x = _check_obs(params, obs)
    cache = [x]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        if i < last:
            x = np.maximum(x, 0)
            cache.append(x)
    return (x, cache) if return_cache else x


def backward(params: MlpParams, obs, grad_q, cache=None, out: MlpParams | None = None) -> MlpParams:
    """Gradients of a scalar loss given dLoss/dq for every batch entry.

    ``cache`` from ``forward(..., return_cache=True)`` avoids a second
    forward pass; otherwise activations are recomputed from ``obs``.
    Gradients are written into ``out`` when given.
    """
    if cache is None:
        _, cache = forward(params, obs, return_cache=True)
    elif cache[0].shape[1] != params.input_dim:
        raise ShapeMismatch("cache does not belong to these parameters")
    grad = np.asarray(grad_q, dtype=params.dtype)
    if grad.shape != (cache[0].shape[0], params.output_dim):
        raise ShapeMismatch(f"loss gradient shape {grad.shape} does not match "
                            f"({cache[0].shape[0]}, {params.output_dim})")
    if out is None:
        out = MlpParams([np.empty_like(w) for w in params.weights], [np.empty_like(b) for b in params.biases])
    for i in range(len(params.weights) - 1, -1, -1):
        inp = cache[i]
        np.matmul(inp.T, grad, out=out.weights[i])
        np.sum(grad, axis=0, out=out.biases[i])
        if i:
            grad = (grad @ params.weights[i].T) * (inp > 0)
    return out
