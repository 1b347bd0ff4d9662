"""Parameter registry and the transformer building blocks shared by all models."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor. Its name is assigned by the owning module tree."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, dtype=T.get_default_dtype(), name=name)


def normal_param(rng, shape, std=INIT_STD):
    return Parameter(rng.standard_normal(shape) * std)


def zeros_param(shape):
    return Parameter(np.zeros(shape))


def ones_param(shape):
    return Parameter(np.ones(shape))


class Module:
    def named_parameters(self, prefix=""):
        seen = {}
        for name, p in self._walk(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name '{name}'")
            if any(q is p for q in seen.values()):
                raise ValueError(f"parameter registered twice (second name '{name}')")
            seen[name] = p
            p.name = name
        return list(seen.items())

    def _walk(self, prefix):
        for attr, value in vars(self).items():
            yield from _walk_value(value, prefix + attr)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"parameter '{name}': expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _walk_value(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value._walk(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk_value(v, f"{name}.{i}")


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = normal_param(rng, (d_in, d_out))
        self.bias = zeros_param((d_out,)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = ones_param((d,))
        self.shift = zeros_param((d,))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.shift, self.eps)


def split_heads(x, n_heads):
    n, s, d = x.shape
    return T.transpose(T.reshape(x, (n, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x):
    n, h, s, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, s, h * dh))


class MultiHeadAttention(Module):
    """Scaled dot-product attention; ``kv`` switches it to cross-attention.

    ``allowed`` is a boolean (queries, keys) or (batch, queries, keys)
    array; False entries are excluded before the softmax.
    """

    def __init__(self, d_model, n_heads, rng):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.last_weights = None
        self.record = False

    def __call__(self, x, kv=None, allowed=None):
        kv = x if kv is None else kv
        if x.ndim != 3 or kv.ndim != 3 or x.shape[0] != kv.shape[0] or x.shape[2] != kv.shape[2]:
            raise T.ShapeError(f"attention: query {x.shape} vs key/value {kv.shape}")
        h = self.n_heads
        q = split_heads(self.q(x), h)
        k = split_heads(self.k(kv), h)
        v = split_heads(self.v(kv), h)
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
        if allowed is not None:
            allowed = np.asarray(allowed, dtype=bool)
            if allowed.ndim == 3:
                allowed = allowed[:, None, :, :]
            scores = T.masked_fill(scores, allowed)
        weights = T.softmax(scores)
        if self.record:
            self.last_weights = weights.data
        return self.out(merge_heads(T.matmul(weights, v)))


class FeedForward(Module):
    def __init__(self, d_model, rng, mult=4):
        self.fc1 = Linear(d_model, mult * d_model, rng)
        self.fc2 = Linear(mult * d_model, d_model, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: self-attention, optional cross-attention, MLP."""

    def __init__(self, d_model, n_heads, rng, cross=False):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        if cross:
            self.ln_q = LayerNorm(d_model)
            self.ln_kv = LayerNorm(d_model)
            self.cross = MultiHeadAttention(d_model, n_heads, rng)
        else:
            self.cross = None
        self.ln2 = LayerNorm(d_model)
        self.mlp = FeedForward(d_model, rng)

    def __call__(self, x, allowed=None, memory=None):
        x = x + self.attn(self.ln1(x), allowed=allowed)
        if self.cross is not None:
            if memory is None:
                raise ValueError("cross-attention block needs memory features")
            x = x + self.cross(self.ln_q(x), kv=self.ln_kv(memory))
        return x + self.mlp(self.ln2(x))
