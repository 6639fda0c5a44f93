"""Layer building blocks on top of :mod:`usi.tensor`."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Container with ordered parameters, buffers and submodules.

    Attribute order defines parameter naming order, so construction order is
    part of the checkpoint layout.
    """

    buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def layers(self) -> list[Module]:
        return [m for _, m in self.children()]

    def replace(self, layers: list[Module]) -> None:
        for name, _ in list(self.children()):
            delattr(self, name)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self.layers():
            x = layer(x)
        return x


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in, out); any leading dims."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(he_uniform(rng, (d_in, d_out), d_in))
        if bias:
            self.bias = Parameter(np.zeros(d_out))
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else x.reshape(-1, self.d_in)
        y = T.matmul(flat, self.weight)
        if hasattr(self, "bias"):
            y = T.add_bias(y, self.bias)
        return y if x.ndim == 2 else y.reshape(*lead, self.d_out)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int = 0,
        groups: int = 1,
        bias: bool = False,
    ):
        super().__init__()
        cg = c_in // groups
        self.weight = Parameter(he_uniform(rng, (c_out, cg, kernel, kernel), cg * kernel * kernel))
        if bias:
            self.bias = Parameter(np.zeros(c_out))
        self.stride, self.pad, self.groups = stride, pad, groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, getattr(self, "bias", None), self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps, self.momentum = eps, momentum

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class GELU(Module):
    def forward(self, x):
        return T.gelu(x)


class Identity(Module):
    def forward(self, x):
        return x


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class GlobalAvgPool(Module):
    def forward(self, x):
        return T.global_avg_pool(x)


class DropPath(Module):
    """Per-sample residual-branch dropout; a backbone-local experiment flag only."""

    def __init__(self, rate: float, seed: int):
        super().__init__()
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0:
            return x
        keep = 1.0 - self.rate
        mask = (self.rng.random(x.shape[0]) < keep) / keep
        full = np.broadcast_to(mask.reshape((-1,) + (1,) * (x.ndim - 1)), x.shape)
        return T.mul(x, Tensor(np.ascontiguousarray(full)))


def mlp(d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator) -> Sequential:
    return Sequential(Linear(d_in, d_hidden, rng), GELU(), Linear(d_hidden, d_out, rng))


class PatchEmbed(Module):
    """Split NCHW images into non-overlapping p x p patches and project them."""

    def __init__(self, channels: int, patch: int, dim: int, tokens: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(channels * patch * patch, dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(tokens, dim)))
        self.patch = patch

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        p = self.patch
        t = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        t = t.reshape(n, (h // p) * (w // p), c * p * p)
        return T.add_broadcast(self.proj(t), self.pos)


class SelfAttention(Module):
    """Single-head scaled dot-product attention over (B, T, D)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.q(x), self.k(x), self.v(x)
        scores = T.matmul(q, k.transpose(0, 2, 1)) * self.scale
        attn = T.softmax(scores, axis=-1)
        return self.out(T.matmul(attn, v))


class TransformerBlock(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, drop_path: float = 0.0, seed: int = 0):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = mlp(dim, hidden, dim, rng)
        self.drop = DropPath(drop_path, seed)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.mlp(self.norm2(x)))


class MixerBlock(Module):
    def __init__(
        self,
        tokens: int,
        dim: int,
        token_hidden: int,
        channel_hidden: int,
        rng: np.random.Generator,
        drop_path: float = 0.0,
        seed: int = 0,
    ):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.token_mix = mlp(tokens, token_hidden, tokens, rng)
        self.norm2 = LayerNorm(dim)
        self.channel_mix = mlp(dim, channel_hidden, dim, rng)
        self.drop = DropPath(drop_path, seed)

    def forward(self, x):
        y = self.token_mix(self.norm1(x).transpose(0, 2, 1)).transpose(0, 2, 1)
        x = x + self.drop(y)
        return x + self.drop(self.channel_mix(self.norm2(x)))


class TokenMean(Module):
    def forward(self, x):
        return T.reduce_mean(x, axis=1)
