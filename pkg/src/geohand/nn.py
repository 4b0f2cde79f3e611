"""Parameter containers and the small set of layers the pipeline needs."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container.

    Trainable tensors are those with ``requires_grad=True``; tensors without it
    are buffers and never show up in ``named_parameters``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, v in state.items():
            if k not in params:
                continue
            p = params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} vs model shape {p.shape}")
            p.data = v.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def _uniform(rng: np.random.Generator, fan_in: int, shape, gain: float = 1.0):
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 gain: float = 1.0, zero: bool = False):
        self.d_in, self.d_out = d_in, d_out
        w = np.zeros((d_in, d_out)) if zero else _uniform(rng, d_in, (d_in, d_out), gain)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(f"linear: expected {self.d_in} input features, got {x.shape[-1]}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else x.reshape(-1, self.d_in)
        out = flat @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out if x.ndim == 2 else out.reshape(*lead, self.d_out)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5):
        self.groups = groups or T.default_groups(channels)
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.weight, self.bias, self.groups, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 zero: bool = False):
        fan_in = c_in * kernel * kernel
        shape = (c_out, c_in, kernel, kernel)
        self.weight = param(np.zeros(shape) if zero else _uniform(rng, fan_in, shape))
        self.bias = param(np.zeros(c_out))
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.padding)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 zero_last: bool = False, last_gain: float = 1.0):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_last, gain=last_gain)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


class MultiHeadAttention(Module):
    """Multi-head attention; ``project_query=False`` uses the queries as given."""

    def __init__(self, d_query: int, d_kv: int, dim: int, heads: int, rng: np.random.Generator,
                 project_query: bool = True, kv_bias: bool = True):
        if dim % heads:
            raise ValueError(f"attention width {dim} not divisible by {heads} heads")
        if not project_query and d_query != dim:
            raise ValueError("unprojected queries must already have the attention width")
        self.heads = heads
        self.q = Linear(d_query, dim, rng) if project_query else None
        self.k = Linear(d_kv, dim, rng, bias=kv_bias)
        self.v = Linear(d_kv, dim, rng, bias=kv_bias)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        q = self.q(x_q) if self.q is not None else x_q
        k, v = self.k(x_kv), self.v(x_kv)
        h = T.attention(split_heads(q, self.heads), split_heads(k, self.heads),
                        split_heads(v, self.heads))
        return self.out(merge_heads(h))


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))
