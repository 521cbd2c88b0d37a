"""Dense layers, MLPs and multi-head graph attention built on the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("identity", "relu", "leaky_relu", "silu")
LEAKY_SLOPE = 0.2


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def _apply_activation(x: Tensor, activation: str) -> Tensor:
    if activation == "identity":
        return x
    if activation == "relu":
        return ad.relu(x)
    if activation == "leaky_relu":
        return ad.leaky_relu(x, LEAKY_SLOPE)
    if activation == "silu":
        return ad.silu(x)
    raise ValueError(f"unknown activation '{activation}'")


@dataclass
class Dense:
    """Affine map with an optional pointwise nonlinearity.

    ``weight`` is [out, in]; the layer accepts inputs shaped [rows, in].
    """

    weight: Tensor
    bias: Tensor
    activation: str = "identity"

    @staticmethod
    def create(rng: np.random.Generator, n_in: int, n_out: int, activation: str = "identity") -> "Dense":
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        w = ad.param(glorot_uniform(rng, n_out, n_in))
        b = ad.param(np.zeros(n_out))
        return Dense(w, b, activation)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense layer expects input dim {self.n_in}, got {x.shape[-1]}")
        h = ad.add(ad.matmul(x, ad.swapaxes(self.weight, 0, 1)), self.bias)
        return _apply_activation(h, self.activation)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def dense_forward(layer: Dense, x) -> Tensor:
    return layer(ad.as_tensor(x))


@dataclass
class MLP:
    layers: list[Dense]

    @staticmethod
    def create(
        rng: np.random.Generator,
        n_in: int,
        n_out: int,
        hidden: int = 128,
        depth: int = 2,
        hidden_activation: str = "silu",
        out_activation: str = "identity",
    ) -> "MLP":
        if depth < 1:
            raise ValueError("depth must be >= 1")
        dims = [n_in] + [hidden] * (depth - 1) + [n_out]
        layers = []
        for i in range(depth):
            act = hidden_activation if i < depth - 1 else out_activation
            layers.append(Dense.create(rng, dims[i], dims[i + 1], act))
        return MLP(layers)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.as_tensor(x)
        for layer in self.layers:
            h = layer(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class GatHead:
    """One attention head: a shared projection plus a concatenation-style scorer.

    ``attn`` holds the [2 * d_out] scoring vector; score(i, j) =
    leaky_relu(attn[:d] . W h_i + attn[d:] . W h_j) over j in i's neighborhood.
    """

    weight: Tensor  # [d_out, d_in]
    attn: Tensor  # [2 * d_out]
    leaky_slope: float = LEAKY_SLOPE

    @staticmethod
    def create(rng: np.random.Generator, d_in: int, d_out: int) -> "GatHead":
        w = ad.param(glorot_uniform(rng, d_out, d_in))
        a = ad.param(rng.normal(0.0, 0.02, size=2 * d_out))
        return GatHead(w, a)

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.attn]


def gat_layer_forward(adjacency: np.ndarray, features: Tensor, heads: Sequence[GatHead]) -> Tensor:
    """Mean over heads of masked attention aggregation along ``adjacency``.

    ``features`` may be [N, d_in] or batched [B, N, d_in]; the adjacency is a
    constant 0/1 matrix shared across the batch and must contain self-loops
    so every node has a non-empty softmax neighborhood. No output
    nonlinearity is applied.
    """
    if len(heads) < 1:
        raise ValueError("at least one attention head required")
    adjacency = np.asarray(adjacency)
    n = adjacency.shape[0]
    if adjacency.shape != (n, n):
        raise ValueError("adjacency must be square")
    if not np.all(np.diagonal(adjacency) == 1):
        raise ValueError("adjacency must contain self-loops")
    features = ad.as_tensor(features)
    if features.shape[-2] != n:
        raise ValueError("feature row count must match adjacency size")
    batched = features.ndim == 3
    mask = adjacency.astype(bool)
    if batched:
        mask = mask[None, :, :]

    out = None
    for head in heads:
        d_out = head.d_out
        if batched:
            b = features.shape[0]
            flat = ad.reshape(features, (b * n, features.shape[-1]))
            h = ad.reshape(ad.matmul(flat, ad.swapaxes(head.weight, 0, 1)), (b, n, d_out))
        else:
            h = ad.matmul(features, ad.swapaxes(head.weight, 0, 1))
        a_src = ad.reshape(ad.slice0(head.attn, 0, d_out), (d_out, 1))
        a_dst = ad.reshape(ad.slice0(head.attn, d_out, 2 * d_out), (d_out, 1))
        src = ad.matmul(h, a_src)  # [..., N, 1]
        dst = ad.swapaxes(ad.matmul(h, a_dst), -1, -2)  # [..., 1, N]
        scores = ad.leaky_relu(ad.add(src, dst), head.leaky_slope)
        alpha = ad.masked_softmax(scores, mask, axis=-1)
        mixed = ad.matmul(alpha, h)
        out = mixed if out is None else ad.add(out, mixed)
    return ad.mul(out, 1.0 / len(heads))


def time_embedding(t_frac: np.ndarray, dim: int = 64, max_freq: float = 2000.0) -> np.ndarray:
    """Sinusoidal features of the scaled diffusion time t/T (a constant input)."""
    if dim % 2 != 0:
        raise ValueError("time embedding dim must be even")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), half))
    ang = np.asarray(t_frac, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
