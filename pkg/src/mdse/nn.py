"""Small module system on top of :mod:`mdse.tensor`: parameters, linear maps, norms, attention."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .lora import LoraAdapter
from .tensor import Tensor


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def param(data, trainable: bool = True, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=T.DTYPE), requires_grad=trainable, name=name)


class Module:
    """Container whose Tensor / Module / list attributes form a named parameter tree."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, LoraAdapter):
                yield f"{name}.A", val.A
                yield f"{name}.B", val.B
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x W^T + b`` with W stored [out, in]; optionally carries a LoRA adapter."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, trainable: bool = True,
                 init_std: float | None = None):
        std = init_std if init_std is not None else 1.0 / math.sqrt(d_in)
        self.weight = param(rng.normal(0.0, std, (d_out, d_in)), trainable)
        self.bias = param(np.zeros(d_out), trainable) if bias else None
        self.lora: LoraAdapter | None = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def attach_lora(self, rng, rank: int, alpha: float, dropout: float = 0.0) -> LoraAdapter:
        self.lora = LoraAdapter.create(rng, self.d_in, self.d_out, rank, alpha, dropout)
        return self.lora

    def __call__(self, x: Tensor) -> Tensor:
        y = T.linear(x, self.weight, self.bias)
        if self.lora is not None:
            y = T.add(y, self.lora.delta(x, training=self.training))
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, trainable: bool = True):
        self.gamma = param(np.ones(dim), trainable)
        self.beta = param(np.zeros(dim), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, D] -> [B, H, L, D/H]"""
    b, n, d = x.shape
    return T.permute(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dk))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v on [B, H, L, d_k] tensors."""
    dk = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    if mask is not None:
        scores = T.add_const(scores, mask)
    return T.matmul(T.softmax(scores), v)


NEG_INF = -1e9


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """[B, L] bool of real keys -> additive mask broadcastable to [B, H, Lq, L]."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


class MultiHeadAttention(Module):
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, rng, dim: int, heads: int, trainable: bool = True, kv_dim: int | None = None):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = Linear(rng, dim, dim, trainable=trainable)
        self.k = Linear(rng, kv_dim, dim, trainable=trainable)
        self.v = Linear(rng, kv_dim, dim, trainable=trainable)
        self.o = Linear(rng, dim, dim, trainable=trainable)

    def projections(self) -> list[Linear]:
        return [self.q, self.k, self.v, self.o]

    def __call__(self, x: Tensor, kv: Tensor | None = None, value: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        key_in = x if kv is None else kv
        val_in = key_in if value is None else value
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(key_in), self.heads)
        v = split_heads(self.v(val_in), self.heads)
        return self.o(merge_heads(attend(q, k, v, mask)))


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int, trainable: bool = True):
        self.fc1 = Linear(rng, dim, hidden, trainable=trainable)
        self.fc2 = Linear(rng, hidden, dim, trainable=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
