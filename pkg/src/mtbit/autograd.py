"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding its output, its parents and a closure that
pushes the output gradient back to the parents.  Only the operations the
network needs are provided; all arithmetic is float64 so that gradients can
be compared against central finite differences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "as_tensor",
    "abs_",
    "batch_norm",
    "clip",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "gelu",
    "layer_norm",
    "log",
    "matmul",
    "max_pool2d",
    "mean",
    "relu",
    "sigmoid",
    "softmax",
    "tanh",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Back-propagate from this node; the default seed is ones."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed after propagation
                if node._parents:
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, True, tuple(p for p in parents if p.requires_grad), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def neg(a):
    def back(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def abs_(a):
    def back(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), back)


def relu(a):
    mask = a.data > 0

    def back(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), back)


def gelu(a):
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))

    def back(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        a._accumulate(g * (cdf + x * pdf))

    return _make(x * cdf, (a,), back)


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), back)


def tanh(a):
    out = np.tanh(a.data)

    def back(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), back)


def log(a):
    def back(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), back)


def clip(a, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)

    def back(g):
        a._accumulate(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), back)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    def back(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes):
    inv = np.argsort(axes)

    def back(g):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), back)


def getitem(a, idx):
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def sum_(a, axis=None, keepdims=False):
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), back)


def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), back)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            a._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), back)


def batch_norm(a, gamma, beta, eps=1e-5, running=None):
    """Per-channel normalisation of an NCHW array.

    With ``running=None`` the batch statistics are used (training mode) and
    the batch mean and biased variance are returned alongside the output so
    the caller can update its running estimates.  Otherwise ``running`` is a
    ``(mean, var)`` pair used as constants (evaluation mode).
    """
    x = a.data
    shp = (1, -1, 1, 1)
    if running is None:
        mu = x.mean(axis=(0, 2, 3))
        xc = x - mu.reshape(shp)
        var = (xc * xc).mean(axis=(0, 2, 3))
    else:
        mu, var = running
        xc = x - mu.reshape(shp)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def back(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if a.requires_grad:
            gx = g * gamma.data.reshape(shp)
            if running is None:
                gx = gx - gx.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gx * xhat).mean(
                    axis=(0, 2, 3), keepdims=True
                )
            a._accumulate(gx * inv.reshape(shp))

    result = _make(out, (a, gamma, beta), back)
    if running is None:
        return result, mu, var
    return result


# ---------------------------------------------------------------- convolution


def _im2col(x, k, stride):
    n, c, _, _ = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, OIkk kernel."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = w.data.reshape(o, -1)
    # batched matmul keeps each sample's arithmetic independent of the others
    out = np.matmul(cols, wmat.T)
    if b is not None:
        out = out + b.data
    out = out.transpose(0, 2, 1).reshape(n, o, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(n, o, ho * wo).transpose(0, 2, 1)
        if w.requires_grad:
            w._accumulate((g2.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 1)))
        if x.requires_grad:
            dcols = np.matmul(g2, wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _make(out, parents, back)


def conv_transpose2d(x, w, b, stride):
    """Transposed convolution with kernel size equal to stride (no overlap).

    ``w`` has shape (C_in, C_out, s, s); each input pixel paints an s x s
    block of the output.
    """
    n, c, h, wd = x.shape
    _, o, s, _ = w.shape
    blocks = np.einsum("nchw,coab->nohawb", x.data, w.data)
    out = blocks.reshape(n, o, h * s, wd * s) + b.data.reshape(1, -1, 1, 1)

    def back(g):
        gb = g.reshape(n, o, h, s, wd, s)
        if x.requires_grad:
            x._accumulate(np.einsum("nohawb,coab->nchw", gb, w.data))
        if w.requires_grad:
            w._accumulate(np.einsum("nohawb,nchw->coab", gb, x.data))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, (x, w, b), back)


def max_pool2d(x, k=3, stride=2, padding=1):
    n, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dxp = np.zeros_like(xp)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho).reshape(1, 1, -1, 1) * stride + di
        cols = np.arange(wo).reshape(1, 1, 1, -1) * stride + dj
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(dxp, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
        x._accumulate(dxp[:, :, padding : padding + h, padding : padding + wd])

    return _make(out, (x,), back)
