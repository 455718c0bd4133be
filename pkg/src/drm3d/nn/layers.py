"""Transformer building blocks on top of :mod:`drm3d.nn.tensor`."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A learnable tensor plus its Adam moments and step count."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=T.DTYPE), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


class Module:
    """Minimal container: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        # explicit zeros so parameters the loss never reaches still get a (zero) gradient
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02, bias: bool = True):
        self.W = Parameter(normal(rng, (d_in, d_out), std))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.scale = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.scale, self.shift, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng, std: float = 0.02):
        self.fc1 = Linear(d, hidden, rng, std)
        self.fc2 = Linear(hidden, d, rng, std)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def _split_heads(x: Tensor, h: int, keys: bool = False) -> Tensor:
    B, N, d = x.shape
    x = x.reshape(B, N, h, d // h)
    # keys come out pre-transposed as (B, h, dk, N) for the score matmul
    return x.transpose(0, 2, 3, 1) if keys else x.transpose(0, 2, 1, 3)


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor, num_heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over already projected ``(B, N, d)`` tensors.

    ``mask`` is a ``(B, Nk)`` bool array marking keys that may be attended to.
    Returns the concatenated head outputs, ``(B, Nq, d)``, before the output
    projection.
    """
    B, Nq, d = queries.shape
    if d % num_heads:
        raise ConfigError(f"d_model={d} is not divisible by num_heads={num_heads}")
    if keys.shape != values.shape or keys.shape[0] != B or keys.shape[2] != d:
        raise ShapeError(f"attention: queries {queries.shape}, keys {keys.shape}, values {values.shape}")
    dk = d // num_heads
    q = _split_heads(queries, num_heads)
    kt = _split_heads(keys, num_heads, keys=True)
    v = _split_heads(values, num_heads)
    scores = T.mul(T.matmul(q, kt), 1.0 / math.sqrt(dk))
    m = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    attn = T.softmax(scores, axis=-1, mask=m)
    out = T.matmul(attn, v)  # (B, h, Nq, dk)
    return out.transpose(0, 2, 1, 3).reshape(B, Nq, d)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, num_heads: int, rng, std: float = 0.02):
        if d_model % num_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
        self.num_heads = num_heads
        self.q = Linear(d_model, d_model, rng, std)
        self.k = Linear(d_model, d_model, rng, std)
        self.v = Linear(d_model, d_model, rng, std)
        self.o = Linear(d_model, d_model, rng, std)

    def __call__(self, queries, keys=None, values=None, mask=None):
        keys = queries if keys is None else keys
        values = keys if values is None else values
        squeeze = queries.ndim == 2
        if squeeze:
            queries, keys, values = (t.reshape((1,) + t.shape) for t in (queries, keys, values))
            mask = None if mask is None else np.asarray(mask)[None]
        out = self.o(multi_head_attention(self.q(queries), self.k(keys), self.v(values), self.num_heads, mask))
        return out.reshape(out.shape[1:]) if squeeze else out


class TransformerBlock(Module):
    """Pre-LN block: ``x + MSA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, d_model: int, num_heads: int, ffn_hidden: int, rng, std: float = 0.02, eps: float = 1e-5):
        self.ln1 = LayerNorm(d_model, eps)
        self.attn = MultiHeadAttention(d_model, num_heads, rng, std)
        self.ln2 = LayerNorm(d_model, eps)
        self.ffn = FeedForward(d_model, ffn_hidden, rng, std)

    def __call__(self, x, mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, mask)
        return x + self.ffn(self.ln2(x))


class CrossAttentionBlock(Module):
    """Pre-LN cross-attention: queries attend to a fixed context, then an FFN."""

    def __init__(self, d_model: int, num_heads: int, ffn_hidden: int, rng, std: float = 0.02, eps: float = 1e-5):
        self.ln_q = LayerNorm(d_model, eps)
        self.ln_ctx = LayerNorm(d_model, eps)
        self.attn = MultiHeadAttention(d_model, num_heads, rng, std)
        self.ln2 = LayerNorm(d_model, eps)
        self.ffn = FeedForward(d_model, ffn_hidden, rng, std)

    def __call__(self, queries, context, context_mask=None):
        ctx = self.ln_ctx(context)
        x = queries + self.attn(self.ln_q(queries), ctx, ctx, context_mask)
        return x + self.ffn(self.ln2(x))
