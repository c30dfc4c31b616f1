"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform on +-1/sqrt(fan_in), the default for linear and conv layers in common frameworks."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Attribute-walking parameter container.

    Tensor attributes are parameters, numpy-array attributes are fixed
    buffers, and Module attributes nest with a dotted prefix. A list of
    modules stored under ``blocks`` is named ``block0``, ``block1``, ...
    Attributes starting with ``_`` are skipped.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, list):
                stem = key[:-1] if key.endswith("s") else key
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{stem}{i}", item
            else:
                yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._children():
            if isinstance(val, np.ndarray):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class LoraLayer(Module):
    """Low-rank residual ``scale * B @ (A @ x)`` feeding ``width`` outputs from ``start``."""

    def __init__(self, d_in: int, width: int, rank: int, alpha: float, start: int, rng):
        self.lora_a = param(fan_in_uniform(rng, (rank, d_in), d_in))
        self.lora_b = param(np.zeros((width, rank)))
        self.scale = alpha / rank
        self._start = start

    @property
    def start(self) -> int:
        return self._start

    def __call__(self, x: Tensor) -> Tensor:
        return T.scale(T.linear(T.linear(x, self.lora_a), self.lora_b), self.scale)

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.lora_b.data @ self.lora_a.data)


class Linear(Module):
    """``x W^T + b``. ``init`` is ``normal`` (truncated normal, std 0.02) or ``fan_in``."""

    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, zero: bool = False, init: str = "normal"):
        if zero:
            w = np.zeros((d_out, d_in))
        elif init == "fan_in":
            w = fan_in_uniform(rng, (d_out, d_in), d_in)
        else:
            w = trunc_normal(rng, (d_out, d_in))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def adapters(self) -> list[LoraLayer]:
        return [v for v in vars(self).values() if isinstance(v, LoraLayer)]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.linear(x, self.weight, self.bias)
        for lora in self.adapters():
            y = T.add_into(y, lora(x), lora.start)
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = param(np.ones(d))
        self.bias = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class Mlp(Module):
    def __init__(self, d: int, hidden: int, rng, init: str = "normal"):
        self.fc1 = Linear(d, hidden, rng, init=init)
        self.fc2 = Linear(hidden, d, rng, init=init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, d) -> (B, heads, N, d / heads)."""
    B, N, d = x.shape
    return T.transpose(T.reshape(x, (B, N, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, N, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (B, heads, N, dh) operands."""
    dh = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    return T.matmul(T.softmax(scores, axis=-1), v)


class CrossAttention(Module):
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, d: int, heads: int, rng, init: str = "normal"):
        self.q = Linear(d, d, rng, init=init)
        self.k = Linear(d, d, rng, init=init)
        self.v = Linear(d, d, rng, init=init)
        self.out = Linear(d, d, rng, init=init)
        self._heads = heads

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        h = self._heads
        q = split_heads(self.q(queries), h)
        k = split_heads(self.k(keys), h)
        v = split_heads(self.v(values), h)
        return self.out(merge_heads(attend(q, k, v)))


def channels_last_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """Layer-normalize the channel axis of a (B, C, H, W) map."""
    y = norm(T.transpose(x, (0, 2, 3, 1)))
    return T.transpose(y, (0, 3, 1, 2))
