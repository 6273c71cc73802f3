"""Small ReLU MLP encoder with hand-written backprop, plus the momentum pair.

Inputs are rows of a (B, d_in) matrix (a 1-D vector is treated as one row).
The last linear layer is followed by L2 normalization; there is no
activation after it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadShape, DimensionMismatch, ShapeMismatch, ZeroVectorError
from .rng import INIT, keyed_rng
from .vecspace import EPS_NORM, row_norms


@dataclass
class Layer:
    weight: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray  # (fan_out,)

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy())


@dataclass
class EncoderParams:
    layers: list[Layer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise BadShape(f"layer shapes {prev.weight.shape} -> {nxt.weight.shape} do not compose")
        for layer in self.layers:
            if layer.bias.shape != (layer.weight.shape[0],):
                raise BadShape(f"bias {layer.bias.shape} does not match weight {layer.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.weight.shape[0] for layer in self.layers]

    def copy(self) -> "EncoderParams":
        return EncoderParams([layer.copy() for layer in self.layers])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def same_shape(self, other: "EncoderParams") -> bool:
        return [a.shape for a in self.arrays()] == [b.shape for b in other.arrays()]


@dataclass
class ForwardTape:
    params: EncoderParams
    inputs: np.ndarray
    pre_activations: list = field(default_factory=list)
    activations: list = field(default_factory=list)  # activations[i] feeds layer i
    z: np.ndarray = None  # pre-normalization output
    norms: np.ndarray = None
    z_hat: np.ndarray = None
    squeeze: bool = False


def init_params(layer_sizes: Sequence[int], seed: int) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise BadShape(f"need at least two positive layer sizes, got {list(layer_sizes)}")
    rng = keyed_rng(seed, INIT)
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return EncoderParams(layers)


def forward(params: EncoderParams, x) -> tuple[np.ndarray, ForwardTape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionMismatch(f"encoder expects inputs of width {params.in_dim}, got shape {x.shape}")
    tape = ForwardTape(params, x, squeeze=squeeze)
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        tape.activations.append(h)
        a = h @ layer.weight.T + layer.bias
        tape.pre_activations.append(a)
        h = a if i == last else np.maximum(a, 0.0)
    norms = row_norms(h)
    if np.any(norms <= EPS_NORM):
        raise ZeroVectorError("encoder output is numerically zero")
    tape.z, tape.norms = h, norms
    tape.z_hat = h / norms[:, None]
    out = tape.z_hat[0] if squeeze else tape.z_hat
    return out, tape


def encode(params: EncoderParams, x) -> np.ndarray:
    return forward(params, x)[0]


def backward(tape: ForwardTape, upstream) -> tuple[list[Layer], np.ndarray]:
    """Gradients of ``sum_b upstream[b] . z_hat[b]`` w.r.t. parameters and inputs.

    Parameter gradients are summed over the batch rows in row order.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != tape.z_hat.shape:
        raise DimensionMismatch(f"upstream shape {g.shape} does not match output {tape.z_hat.shape}")
    zh = tape.z_hat
    # normalization Jacobian (I - z_hat z_hat^T) / |z|
    g = (g - zh * np.sum(zh * g, axis=1, keepdims=True)) / tape.norms[:, None]
    layers = tape.params.layers
    grads: list[Layer] = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        if i != len(layers) - 1:
            g = g * (tape.pre_activations[i] > 0.0)
        grads[i] = Layer(g.T @ tape.activations[i], g.sum(axis=0))
        g = g @ layers[i].weight
    dx = g[0] if tape.squeeze else g
    return grads, dx


def sgd_update(params: EncoderParams, grads: Sequence[Layer], lr: float) -> EncoderParams:
    return EncoderParams(
        [Layer(p.weight - lr * gr.weight, p.bias - lr * gr.bias) for p, gr in zip(params.layers, grads)]
    )


@dataclass
class EncoderPair:
    query: EncoderParams
    key: EncoderParams
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.query.same_shape(self.key):
            raise ShapeMismatch("query and key encoders differ in shape")

    @classmethod
    def from_query(cls, query: EncoderParams, momentum: float = 0.999) -> "EncoderPair":
        return cls(query, query.copy(), momentum)


def momentum_update(pair: EncoderPair) -> EncoderPair:
    """key <- m * key + (1 - m) * query. The query encoder is untouched."""
    if not pair.query.same_shape(pair.key):
        raise ShapeMismatch("query and key encoders differ in shape")
    m = pair.momentum
    key = EncoderParams(
        [
            Layer(m * kl.weight + (1.0 - m) * ql.weight, m * kl.bias + (1.0 - m) * ql.bias)
            for kl, ql in zip(pair.key.layers, pair.query.layers)
        ]
    )
    return EncoderPair(pair.query, key, m)
