"""Multilayer perceptrons with explicit, serializable parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ervae.errors import NumericError
from ervae.nn.tensor import Tensor, linear

ACTIVATIONS = ("relu", "tanh", "identity")


def xavier_uniform_init(fan_in, fan_out, rng):
    """Glorot-uniform matrix of shape (fan_out, fan_in), bound sqrt(6/(fan_in+fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan sizes must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class MlpParams:
    layer_sizes: list
    activations: list
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        n_layers = len(self.layer_sizes) - 1
        if n_layers < 1:
            raise ValueError("an MLP needs at least an input and an output size")
        if len(self.activations) != n_layers:
            raise ValueError(f"expected {n_layers} activations, got {len(self.activations)}")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i + 1], self.layer_sizes[i]):
                raise ValueError(f"layer {i}: weight shape {w.shape} does not match sizes")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match sizes")

    @property
    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def named_arrays(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w.data
            out[f"{prefix}b{i}"] = b.data
        return out

    def load_arrays(self, arrays, prefix=""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.data = np.array(arrays[f"{prefix}w{i}"], dtype=np.float64).reshape(w.shape)
            b.data = np.array(arrays[f"{prefix}b{i}"], dtype=np.float64).reshape(b.shape)

    def freeze(self):
        for p in self.parameters:
            p.requires_grad = False
            p.grad = None
        return self

    def spec(self):
        return {"layer_sizes": list(self.layer_sizes), "activations": list(self.activations)}


def init_mlp(layer_sizes, activations, rng, init="xavier"):
    """Build an MLP. Weights use Xavier-uniform, biases start at zero.

    ``init`` may be a single scheme or one per layer (``"xavier"`` or ``"zeros"``).
    """
    n_layers = len(layer_sizes) - 1
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + ["identity"]
    schemes = [init] * n_layers if isinstance(init, str) else list(init)
    weights, biases = [], []
    for i in range(n_layers):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        if schemes[i] == "xavier":
            w = xavier_uniform_init(fan_in, fan_out, rng)
        elif schemes[i] == "zeros":
            w = np.zeros((fan_out, fan_in))
        else:
            raise ValueError(f"unknown init scheme {schemes[i]!r}")
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpParams(list(layer_sizes), list(activations), weights, biases)


def mlp_forward(params, x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != params.layer_sizes[0]:
        raise ValueError(f"input last dimension {x.shape[-1]} != {params.layer_sizes[0]}")
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = linear(h, w, b)
        if act == "relu":
            h = h.relu()
        elif act == "tanh":
            h = h.tanh()
    if not np.all(np.isfinite(h.data)):
        raise NumericError("MLP produced non-finite output")
    return h.reshape(-1) if squeeze else h


def mlp_forward_numpy(params, x):
    """Forward pass on raw arrays, no tape. Used by hot evaluation loops."""
    h = np.asarray(x, dtype=np.float64)
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = h @ w.data.T + b.data
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
    return h
