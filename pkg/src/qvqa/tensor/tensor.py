"""Reverse-mode autodiff over numpy arrays.

Shapes must match exactly for elementwise ops; the only implicit
broadcast is a scalar (python number or single-element Tensor) against a
tensor. Anything else goes through an explicit op (``expand``,
``linear``, ``layer_norm``) so that shape bugs fail loudly.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
COS_EPS = 1e-8
MASK_VALUE = -1e9


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # backward -------------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            _check_same(self.shape, grad.shape, "backward seed")
        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _check_same(a, b, op):
    if tuple(a) != tuple(b):
        raise ShapeError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


def _result(data, parents, backward):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if req:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# elementwise -------------------------------------------------------------


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + a.dtype.type(c), (a,), lambda g: (g,))
    if a.shape != b.shape and b.size == 1 and b.ndim <= 1:
        return _result(a.data + b.data.reshape(()), (a, b), lambda g: (g, np.asarray(g.sum()).reshape(b.shape)))
    if a.shape != b.shape and a.size == 1 and a.ndim <= 1:
        return add(b, a)
    _check_same(a.shape, b.shape, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, b)
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if b.size == 1 and b.ndim <= 1:
        return scale(a, b)
    if a.size == 1 and a.ndim <= 1:
        return scale(b, a)
    raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(a, s):
    """Scalar times tensor; ``s`` may be a python number or a size-1 Tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale: expected a scalar multiplier, got shape {s.shape}")
        sv = s.data.reshape(())
        ad = a.data

        def bw(g):
            return g * sv, np.asarray((g * ad).sum(), dtype=s.dtype).reshape(s.shape)

        return _result(ad * sv, (a, s), bw)
    c = a.dtype.type(float(s))
    return _result(a.data * c, (a,), lambda g: (g * c,))


def div(a, s):
    """Tensor divided by a scalar (python number or size-1 Tensor)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"div: divisor must be a scalar, got shape {s.shape}")
        sv = s.data.reshape(())
        ad = a.data
        out = ad / sv

        def bw(g):
            return g / sv, np.asarray(-(g * ad).sum() / (sv * sv), dtype=s.dtype).reshape(s.shape)

        return _result(out, (a, s), bw)
    return scale(a, 1.0 / float(s))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def gelu(a):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    ad = a.data
    return _result(kernels.gelu_fwd(ad), (a,), lambda g: (kernels.gelu_bwd(ad, g),))


# reductions --------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum_(a, axis=None):
    shape = a.shape
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[_norm_axis(axis, a.ndim)]
    return scale(sum_(a, axis), 1.0 / n)


def amax(a, axis=-1):
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    axis = _norm_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (z,)

    return _result(out, (a,), bw)


# shape ops ---------------------------------------------------------------


def reshape(a, shape):
    old = a.shape
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def expand(a, n):
    """Repeat ``a`` along a new leading axis of length ``n``."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=0),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = _norm_axis(axis, ref.ndim)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(out, tensors, bw)


def split(a, sizes, axis=0):
    axis = _norm_axis(axis, a.ndim)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of shape {a.shape}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    return out


def getitem(a, idx):
    shape = a.shape
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    out = out.copy()

    def bw(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _result(out, (a,), bw)


# linear algebra ----------------------------------------------------------


def matmul(a, b):
    """(..., n, k) @ (..., k, p) with equal leading dims, or against a 2-D right operand."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    shared_right = b.ndim == 2 and a.ndim > 2
    if not shared_right and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared_right:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x, weight, bias=None):
    """x (..., in) @ weight (in, out) + bias (out,)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw)


# neural-net primitives ---------------------------------------------------


def softmax(a):
    """Softmax over the last axis (max-subtracted)."""
    y = kernels.softmax_fwd(a.data)
    return _result(y, (a,), lambda g: (kernels.softmax_bwd(y, g),))


def log_softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _result(out, (a,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} vs input {x.shape}")
    y, xhat, rstd = kernels.layernorm_fwd(x.data, gamma.data, beta.data, eps)
    shape = x.shape
    gd = gamma.data

    def bw(g):
        gx, gg, gb = kernels.layernorm_bwd(g, xhat, rstd, gd)
        return gx.reshape(shape), gg, gb

    return _result(y, (x, gamma, beta), bw)


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"embedding: token id out of range [0, {vocab})")
    wshape = weight.shape

    def bw(g):
        z = np.zeros(wshape, dtype=g.dtype)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (z,)

    return _result(weight.data[ids], (weight,), bw)


def masked_fill(scores, allowed, value=MASK_VALUE):
    """Replace disallowed attention scores with a large negative constant.

    ``allowed`` is a constant boolean array broadcastable to ``scores``;
    disallowed positions receive zero gradient.
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), scores.shape)
    out = np.where(allowed, scores.data, scores.dtype.type(value))
    return _result(out, (scores,), lambda g: (np.where(allowed, g, 0).astype(g.dtype),))


def causal_mask(n):
    """Lower-triangular boolean matrix: row i may attend to columns <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def l2_normalize(x, eps=COS_EPS):
    """x / (||x|| + eps) along the last axis."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    d = n + xd.dtype.type(eps)
    out = xd / d

    def bw(g):
        dot = (g * xd).sum(axis=-1, keepdims=True)
        safe_n = np.where(n > 0, n, 1)
        return (g / d - xd * dot / (d * d * safe_n),)

    return _result(out, (x,), bw)


def cosine_similarity(a, b, eps=COS_EPS):
    """Row-wise cosine similarity along the last axis, norms guarded by ``eps``."""
    _check_same(a.shape, b.shape, "cosine_similarity")
    return sum_(mul(l2_normalize(a, eps), l2_normalize(b, eps)), axis=-1)


def cross_entropy(logits, targets, mask=None):
    """Mean of -log softmax(logits)[target] over rows selected by ``mask``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D (rows, classes), got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows vs {targets.shape[0]} targets")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows vs mask of length {mask.shape[0]}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked out")
    if targets[mask].size and (targets[mask].min() < 0 or targets[mask].max() >= k):
        raise ValueError(f"cross_entropy: target id out of range [0, {k})")
    ld = logits.data
    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    safe_t = np.where(mask, targets, 0)
    nll = lse - z[rows, safe_t]
    loss = (nll * mask).sum() / count

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, safe_t] -= 1.0
        p *= (mask[:, None] * (g / count)).astype(p.dtype)
        return (p.astype(ld.dtype),)

    return _result(np.asarray(loss, dtype=ld.dtype), (logits,), bw)


def op_catalog():
    """Names of the differentiable primitives this engine provides."""
    return {
        "matmul", "linear", "add", "mul", "scale", "div", "mean", "sum", "amax",
        "concat", "split", "reshape", "transpose", "expand", "getitem", "softmax",
        "log_softmax", "log", "exp", "layer_norm", "gelu", "embedding",
        "masked_fill", "l2_normalize", "cosine_similarity", "cross_entropy",
    }


def randn(shape, rng, std=1.0, requires_grad=False):
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad, dtype=_DEFAULT_DTYPE)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=_DEFAULT_DTYPE)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=_DEFAULT_DTYPE)
