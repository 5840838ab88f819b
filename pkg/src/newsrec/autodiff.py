"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation produces a ``Tensor`` node holding a numpy array plus a
closure that routes the output gradient back to its parents. ``backward``
walks the recorded graph in reverse topological order and accumulates
gradients into every node with ``requires_grad``. Nodes whose inputs are
all constant record no closure, so frozen parameter subgraphs cost nothing
during backprop.

All math is 64-bit; 32-bit only ever appears at file-format boundaries.
"""

import contextlib

import numpy as np
from scipy.special import erf as _erf


class ShapeMismatch(ValueError):
    """Operands disagree on a dimension the operation requires to match."""


class AllMasked(ValueError):
    """A softmax row has no unmasked entry."""


class NotScalarLoss(ValueError):
    """backward() was started from a non-scalar node."""


_grad_enabled = True


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation mode). Nestable."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    """Build an op output; records the closure only when a parent needs grads."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Accumulate gradients of a scalar loss into every requires_grad node."""
    if not isinstance(loss, Tensor):
        raise NotScalarLoss("loss must be a Tensor")
    if loss.data.shape != ():
        raise NotScalarLoss(f"loss has shape {loss.data.shape}, expected scalar")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), back)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), back)


def exp(t):
    t = as_tensor(t)
    data = np.exp(t.data)

    def back(g):
        _accum(t, g * data)

    return _node(data, (t,), back)


def log(t):
    t = as_tensor(t)
    data = np.log(t.data)

    def back(g):
        _accum(t, g / t.data)

    return _node(data, (t,), back)


def sqrt(t):
    t = as_tensor(t)
    data = np.sqrt(t.data)

    def back(g):
        _accum(t, g * 0.5 / data)

    return _node(data, (t,), back)


def tanh(t):
    t = as_tensor(t)
    data = np.tanh(t.data)

    def back(g):
        _accum(t, g * (1.0 - data * data))

    return _node(data, (t,), back)


def sigmoid(t):
    t = as_tensor(t)
    # Split by sign to avoid overflow in exp.
    x = t.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        _accum(t, g * data * (1.0 - data))

    return _node(data, (t,), back)


def relu(t):
    t = as_tensor(t)
    data = np.maximum(t.data, 0.0)

    def back(g):
        _accum(t, g * (t.data > 0))

    return _node(data, (t,), back)


def gelu(t):
    """Exact (erf-based) GELU, matching BERT's activation."""
    t = as_tensor(t)
    x = t.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    data = x * cdf

    def back(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accum(t, g * (cdf + x * pdf))

    return _node(data, (t,), back)


# ---------------------------------------------------------------------------
# linear algebra / shape ops

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def back(g):
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _node(data, (a, b), back)


def tsum(t, axis=None, keepdims=False):
    t = as_tensor(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, t.data.shape).copy()
                   if np.ndim(g) == 0 else np.full(t.data.shape, g))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(t, np.broadcast_to(g, t.data.shape).copy())

    return _node(data, (t,), back)


def tmean(t, axis=None, keepdims=False):
    t = as_tensor(t)
    if axis is None:
        n = t.data.size
    else:
        n = t.data.shape[axis]
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(t, shape):
    t = as_tensor(t)
    orig = t.data.shape
    data = t.data.reshape(shape)

    def back(g):
        _accum(t, g.reshape(orig))

    return _node(data, (t,), back)


def swapaxes(t, a, b):
    t = as_tensor(t)
    data = t.data.swapaxes(a, b)

    def back(g):
        _accum(t, g.swapaxes(a, b))

    return _node(data, (t,), back)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def back(g):
        start = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            _accum(t, g[tuple(idx)])
            start += n

    return _node(data, tensors, back)


def select(t, axis, index):
    """Take one index along an axis, dropping that axis (e.g. the CLS slot)."""
    t = as_tensor(t)
    data = np.take(t.data, index, axis=axis)

    def back(g):
        full = np.zeros_like(t.data)
        idx = [slice(None)] * t.data.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        _accum(t, full)

    return _node(data, (t,), back)


def rows(table, ids):
    """Row gather from an embedding table; backward scatter-adds.

    Raises ShapeMismatch when an id falls outside the table.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeMismatch(
            f"id out of range for table with {table.data.shape[0]} rows")
    data = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _node(data, (table,), back)


# ---------------------------------------------------------------------------
# fused neural-net primitives

def masked_softmax(x, mask=None, axis=-1, allow_empty=False):
    """Numerically stable softmax with hard masking.

    Masked entries come out exactly 0 and receive no gradient. With
    ``allow_empty`` a fully masked row yields all-zero weights instead of
    raising AllMasked (used for empty click histories).
    """
    x = as_tensor(x)
    if mask is None:
        mask_b = np.ones(x.data.shape, dtype=bool)
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    any_valid = mask_b.any(axis=axis, keepdims=True)
    if not allow_empty and not any_valid.all():
        raise AllMasked("softmax row with every entry masked")

    neg_inf = np.where(mask_b, x.data, -np.inf)
    m = neg_inf.max(axis=axis, keepdims=True, initial=-np.inf)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask_b, np.exp(np.where(mask_b, x.data, 0.0) - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    w = np.where(any_valid, e / np.where(s > 0, s, 1.0), 0.0)

    def back(g):
        inner = (g * w).sum(axis=axis, keepdims=True)
        _accum(x, w * (g - inner))

    return _node(w, (x,), back)


def layer_norm(x, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def back(g):
        gxh = g * gain.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        _accum(x, gx)
        reduce_axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=reduce_axes))
        _accum(bias, g.sum(axis=reduce_axes))

    return _node(data, (x, gain, bias), back)


def conv1d_same(x, filters, bias):
    """Same-padded 1-D convolution over the sequence axis.

    x: (..., n, d); filters: (k, d, f) with odd k; bias: (f). Output
    (..., n, f). Activation is left to the caller.
    """
    x, filters, bias = as_tensor(x), as_tensor(filters), as_tensor(bias)
    k, d, f = filters.data.shape
    if k % 2 != 1:
        raise ShapeMismatch(f"conv width must be odd, got {k}")
    if x.data.shape[-1] != d:
        raise ShapeMismatch(f"conv: input width {x.data.shape[-1]} != filter depth {d}")
    if bias.data.shape != (f,):
        raise ShapeMismatch(f"conv: bias shape {bias.data.shape} != ({f},)")
    p = (k - 1) // 2
    n = x.data.shape[-2]
    pad = [(0, 0)] * (x.data.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)  # (..., n, d, k)
    data = np.einsum("...ndk,kdf->...nf", win, filters.data) + bias.data

    def back(g):
        g2 = g.reshape(-1, n, f)
        win2 = win.reshape(-1, n, d, k)
        _accum(filters, np.einsum("bnf,bndk->kdf", g2, win2))
        _accum(bias, g2.sum(axis=(0, 1)))
        gwin = np.einsum("...nf,kdf->...ndk", g, filters.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j:j + n, :] += gwin[..., j]
        _accum(x, gxp[..., p:p + n, :])

    return _node(data, (x, filters, bias), back)


def dropout(x, rate, rng):
    """Inverted dropout; call only while training."""
    if rate <= 0.0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))
