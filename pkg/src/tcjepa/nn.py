"""Parameter containers and transformer building blocks."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A leaf tensor that optimisers and checkpoints know about."""

    __slots__ = ()

    def __init__(self, data, requires_grad=True):
        super().__init__(np.array(data, dtype=ad.get_default_dtype()), requires_grad=requires_grad)


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ad.DimensionError(f"{k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in, d_out, rng, zero=False, bias=True):
        w = np.zeros((d_out, d_in)) if zero else trunc_normal(rng, (d_out, d_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-6):
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return ad.layernorm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    def __init__(self, d_in, hidden, d_out, rng, zero_out=False):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng, zero=zero_out)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


def split_heads(x, heads):
    *lead, t, d = x.shape
    x = ad.reshape(x, (*lead, t, heads, d // heads))
    return ad.swapaxes(x, -2, -3)


def merge_heads(x):
    x = ad.swapaxes(x, -2, -3)
    *lead, t, h, dh = x.shape
    return ad.reshape(x, (*lead, t, h * dh))


def attend(q, k, v, mask=None):
    """softmax(q k^T / sqrt(dh) + mask) v over already-split heads."""
    logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        logits = ad.add(logits, mask)
    return ad.matmul(ad.softmax(logits, axis=-1), v)


class SelfAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError(f"heads={heads} must divide dim={d}")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)

    def qkv_heads(self, h):
        d = h.shape[-1]
        qkv = self.qkv(h)
        q = split_heads(qkv[..., :d], self.heads)
        k = split_heads(qkv[..., d:2 * d], self.heads)
        v = split_heads(qkv[..., 2 * d:], self.heads)
        return q, k, v

    def __call__(self, h):
        q, k, v = self.qkv_heads(h)
        return self.proj(merge_heads(attend(q, k, v)))


def modulate(h, shift, scale_):
    """AdaLN modulation h * (1 + scale) + shift."""
    return ad.add(ad.mul(h, ad.add(scale_, 1.0)), shift)


class Block(Module):
    """Pre-LayerNorm transformer block: x + attn(LN x), then x + mlp(LN x)."""

    def __init__(self, d, heads, mlp_ratio, rng):
        self.norm1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), d, rng)

    def __call__(self, x, mod=None):
        h = self.norm1(x)
        if mod is not None:
            h = modulate(h, mod[0], mod[1])
        x = ad.add(x, self.attn(h))
        h = self.norm2(x)
        if mod is not None:
            h = modulate(h, mod[2], mod[3])
        return ad.add(x, self.mlp(h))
