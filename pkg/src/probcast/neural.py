"""Dense feed-forward networks with hand-written backpropagation and Adam.

Everything is float64. Inputs may be a single vector of shape (in,) or a batch
of shape (n, in); a layer computes ``act(x @ W.T + b)`` with ``W`` stored as
(out, in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch, NonFiniteGradient, StaleCache

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionMismatch(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


class Mlp:
    """Stack of :class:`Dense` layers."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionMismatch(f"layer output {a.out_dim} feeds input {b.in_dim}")
        self.layers = layers
        self.version = 0

    @classmethod
    def init(cls, sizes, rng, hidden_activation="tanh", output_activation="identity"):
        """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Dense(rng.uniform(-limit, limit, (fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def sizes(self):
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    @property
    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def touch(self):
        """Mark parameters as modified, invalidating outstanding caches."""
        self.version += 1

    def copy(self):
        return Mlp([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def __repr__(self):
        acts = ",".join(l.activation for l in self.layers)
        return f"Mlp({'->'.join(map(str, self.sizes))}; {acts})"


@dataclass
class ForwardCache:
    inputs: list
    outputs: list
    version: int
    net_id: int
    squeezed: bool


@dataclass
class GradientTape:
    """Per-layer ``(dW, db)`` plus the gradient with respect to the input."""

    layers: list
    input_grad: np.ndarray = field(default=None)

    def parameters(self):
        out = []
        for dw, db in self.layers:
            out.extend((dw, db))
        return out

    @classmethod
    def zeros_like(cls, net):
        return cls([(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers])


def _activate(kind, pre):
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return pre


def forward(net: Mlp, x):
    """Return ``(output, cache)``; the cache feeds :func:`backward`."""
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    h = x[None, :] if squeezed else x
    if h.ndim != 2 or h.shape[1] != net.in_dim:
        raise DimensionMismatch(f"input of shape {x.shape} for a network with input dimension {net.in_dim}")
    inputs, outputs = [], []
    for layer in net.layers:
        inputs.append(h)
        h = _activate(layer.activation, h @ layer.weight.T + layer.bias)
        outputs.append(h)
    cache = ForwardCache(inputs, outputs, net.version, id(net), squeezed)
    return (h[0] if squeezed else h), cache


def backward(net: Mlp, cache: ForwardCache, output_gradient) -> GradientTape:
    """Reverse-mode gradients of the scalar whose output gradient is supplied.

    Raises :class:`StaleCache` when the network changed after the forward pass.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCache("forward cache does not belong to the current parameters")
    g = np.asarray(output_gradient, dtype=np.float64)
    if cache.squeezed:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise DimensionMismatch(f"output gradient {g.shape} vs output {cache.outputs[-1].shape}")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        y = cache.outputs[i]
        if layer.activation == "tanh":
            g = g * (1.0 - y * y)
        elif layer.activation == "relu":
            g = g * (y > 0.0)
        grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        g = g @ layer.weight
    return GradientTape(grads, g[0] if cache.squeezed else g)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in net.parameters()]
        state.v = [np.zeros_like(p) for p in net.parameters()]
        return state


def adam_step(net: Mlp, tape: GradientTape, state: AdamState):
    """One bias-corrected Adam update, in place. Returns ``(net, state)``."""
    params = net.parameters()
    grads = tape.parameters()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise DimensionMismatch("gradient tape is not congruent with the network")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.touch()
    return net, state
