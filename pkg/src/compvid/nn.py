"""Parameter containers and the small layer set used by the models."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class; parameters are discovered by walking attributes.

    Attribute order is insertion order, so ``named_parameters`` yields a
    stable, path-addressable listing (``"down.0.res.conv1.weight"``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _walk(value, path):
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")


def param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, dtype=np.float32, bias: bool = True,
                 zero: bool = False):
        bound = 0.0 if zero else 1.0 / math.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, (fan_in, fan_out)), dtype)
        self.bias = param(np.zeros(fan_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, dtype=np.float32, stride: int = 1,
                 zero: bool = False):
        bound = 0.0 if zero else 1.0 / math.sqrt(cin * k * k)
        self.weight = param(rng.uniform(-bound, bound, (cout, cin, k, k)), dtype)
        self.bias = param(np.zeros(cout), dtype)
        self._stride = stride
        self._pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._pad)


class TemporalConv(Module):
    """1x1x3 convolution along frames; input [B,F,C,H,W]."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        bound = 1.0 / math.sqrt(cin * 3)
        self.weight = param(rng.uniform(-bound, bound, (cout, cin, 3)), dtype)
        self.bias = param(np.zeros(cout), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.temporal_conv1d(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param(np.ones(channels), dtype)
        self.beta = param(np.zeros(channels), dtype)
        self._groups = math.gcd(groups, channels)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self._groups, self.gamma, self.beta, self._eps)


class LayerNorm(Module):
    """Normalization over the last axis, built on group_norm with one group."""

    def __init__(self, dim: int, dtype=np.float32):
        self.norm = GroupNorm(dim, 1, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        shape = x.shape
        y = self.norm(T.reshape(x, (-1, shape[-1])))
        return T.reshape(y, shape)


class Attention(Module):
    """Single-head attention with input/output projections."""

    def __init__(self, dim: int, head_dim: int, rng, dtype=np.float32, context_dim: int | None = None):
        context_dim = context_dim or dim
        self.q = Linear(dim, head_dim, rng, dtype, bias=False)
        self.k = Linear(context_dim, head_dim, rng, dtype, bias=False)
        self.v = Linear(context_dim, head_dim, rng, dtype, bias=False)
        self.out = Linear(head_dim, dim, rng, dtype)

    def __call__(self, x: Tensor, context: Tensor | None = None, identity: bool = False) -> Tensor:
        ctx = x if context is None else context
        h = T.attention(self.q(x), self.k(ctx), self.v(ctx), identity=identity)
        return self.out(h)


class FeedForward(Module):
    def __init__(self, dim: int, rng, dtype=np.float32, mult: int = 2):
        self.fc1 = Linear(dim, dim * mult, rng, dtype)
        self.fc2 = Linear(dim * mult, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class TemporalTransformer(Module):
    """One pre-norm transformer layer attending across frames at each site.

    Input and output are [B,F,C,H,W].  Setting ``force_identity`` replaces
    the attention matrix by the identity so that no frame mixing happens.
    """

    def __init__(self, dim: int, head_dim: int, rng, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, head_dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, rng, dtype)
        self.force_identity = False

    def __call__(self, x: Tensor) -> Tensor:
        b, f, c, h, w = x.shape
        seq = T.reshape(T.transpose(x, (0, 3, 4, 1, 2)), (b * h * w, f, c))
        seq = seq + self.attn(self.norm1(seq), identity=self.force_identity)
        seq = seq + self.ff(self.norm2(seq))
        return T.transpose(T.reshape(seq, (b, h, w, f, c)), (0, 3, 4, 1, 2))
