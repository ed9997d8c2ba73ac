"""Differentiable primitives and small composites.

Backward rules are written with the same tensor operations they
differentiate, which is what makes gradient-of-gradient passes work: under
``create_graph`` the backward computation is recorded like any forward one.
Saved masks/indices (relu sign, argmax one-hot, gather indices) are constants
of the backward map, which is the correct almost-everywhere derivative.
"""

from __future__ import annotations

import numpy as np

from ..errors import DTypeMismatchError, ShapeMismatchError
from .tensor import Tensor, result_tensor
from . import kernels

__all__ = [
    "constant", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt",
    "square", "absolute", "pow_const", "sigmoid", "relu", "maximum_scalar",
    "add_relu", "reshape", "transpose", "expand", "concat", "getslice",
    "embed_slice", "pad", "take", "scatter_add", "tsum", "tmean", "max_axis",
    "matmul", "softmax", "batch_norm", "channel_sum", "channel_dot",
    "channel_affine",
]


def _contig(arr):
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def constant(value, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _coerce_scalar(t: Tensor, other):
    """Python/numpy scalars become raw numpy scalars of the tensor dtype."""
    return t.dtype.type(other)


def _check_pair(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise DTypeMismatchError(f"mixed dtypes {a.dtype} vs {b.dtype}")


def _binary_data(op, a, b, name):
    try:
        return op(a, b)
    except ValueError as e:
        raise ShapeMismatchError(f"{name}: {e}") from None


def sum_to(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to the operand's shape."""
    shape = tuple(shape)
    if tuple(g.shape) == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if tuple(g.shape) != shape:
        g = reshape(g, shape)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        c = _coerce_scalar(a, b)
        return result_tensor(a.data + c, (a,), lambda g: (g,), "add")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_pair(a, b)
    data = _binary_data(np.add, a.data, b.data, "add")

    def bw(g):
        return (sum_to(g, a.shape), sum_to(g, b.shape))

    return result_tensor(data, (a, b), bw, "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        c = _coerce_scalar(a, b)
        return result_tensor(a.data - c, (a,), lambda g: (g,), "sub")
    if not isinstance(a, Tensor):
        c = _coerce_scalar(b, a)
        return result_tensor(c - b.data, (b,), lambda g: (neg(g),), "rsub")
    _check_pair(a, b)
    data = _binary_data(np.subtract, a.data, b.data, "sub")

    def bw(g):
        return (sum_to(g, a.shape), neg(sum_to(g, b.shape)))

    return result_tensor(data, (a, b), bw, "sub")


def mul(a, b):
    if not isinstance(b, Tensor):
        c = _coerce_scalar(a, b)
        return result_tensor(a.data * c, (a,), lambda g: (mul(g, float(c)),), "mul")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_pair(a, b)
    data = _binary_data(np.multiply, a.data, b.data, "mul")

    def bw(g):
        return (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape))

    return result_tensor(data, (a, b), bw, "mul")


def div(a, b):
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    if not isinstance(a, Tensor):
        c = _coerce_scalar(b, a)
        out = result_tensor(c / b.data, (b,), None, "rdiv")

        def bw_r(g):
            return (neg(div(mul(g, out), b)),)

        if out.node is not None:
            out.node.backward = bw_r
        return out
    _check_pair(a, b)
    data = _binary_data(np.divide, a.data, b.data, "div")
    out = result_tensor(data, (a, b), None, "div")

    def bw(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, out), b)), b.shape)
        return (ga, gb)

    if out.node is not None:
        out.node.backward = bw
    return out


def neg(a: Tensor):
    return result_tensor(-a.data, (a,), lambda g: (neg(g),), "neg")


def exp(a: Tensor):
    out = result_tensor(np.exp(a.data), (a,), None, "exp")
    if out.node is not None:
        out.node.backward = lambda g: (mul(g, out),)
    return out


def log(a: Tensor):
    return result_tensor(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a: Tensor):
    out = result_tensor(np.sqrt(a.data), (a,), None, "sqrt")
    if out.node is not None:
        out.node.backward = lambda g: (div(mul(g, 0.5), out),)
    return out


def square(a: Tensor):
    return result_tensor(a.data * a.data, (a,), lambda g: (mul(mul(g, 2.0), a),), "square")


def absolute(a: Tensor):
    def bw(g):
        return (mul(g, Tensor(np.sign(a.data))),)

    return result_tensor(np.abs(a.data), (a,), bw, "abs")


def pow_const(a: Tensor, p: float):
    p = float(p)
    data = a.data ** a.dtype.type(p)

    def bw(g):
        return (mul(mul(g, p), pow_const(a, p - 1.0)),)

    return result_tensor(data, (a,), bw, "pow")


def masked_grad(g: Tensor, x: Tensor, thresh: float):
    """g where x > thresh else 0 (linear in g; zero derivative w.r.t. x)."""
    def bw(gg):
        return (masked_grad(gg, x, thresh), None)

    data = kernels.masked_grad(_contig(g.data), _contig(x.data), x.dtype.type(thresh))
    return result_tensor(data, (g, x), bw, "masked_grad")


def maximum_scalar(a: Tensor, c: float):
    """Elementwise max(a, c); subgradient 0 where a == c.

    The backward mask is derived from the input buffer when the backward
    pass runs; leaf data must not be mutated between forward and backward
    (the optimizer steps only after gradients are taken).
    """
    cc = _coerce_scalar(a, c)

    def bw(g):
        return (masked_grad(g, a, float(cc)),)

    return result_tensor(np.maximum(a.data, cc), (a,), bw, "max_scalar")


def relu(a: Tensor):
    return maximum_scalar(a, 0.0)


def add_relu(a: Tensor, b: Tensor):
    """Fused max(a + b, 0) for same-shape operands (residual joins)."""
    _check_pair(a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add_relu shapes {a.shape} vs {b.shape}")
    out = result_tensor(kernels.add_relu(_contig(a.data), _contig(b.data)),
                        (a, b), None, "add_relu")

    def bw(g):
        gr = masked_grad(g, out, 0.0)
        return (gr, gr)

    if out.node is not None:
        out.node.backward = bw
    return out


def sigmoid(a: Tensor):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = result_tensor(out_data, (a,), None, "sigmoid")
    if out.node is not None:
        out.node.backward = lambda g: (mul(mul(g, out), sub(1.0, out)),)
    return out


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape):
    shape = tuple(shape)
    orig = a.shape

    def bw(g):
        return (reshape(g, orig),)

    return result_tensor(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (transpose(g, inv),)

    return result_tensor(np.transpose(a.data, axes), (a,), bw, "transpose")


def expand(a: Tensor, shape):
    shape = tuple(shape)
    orig = a.shape

    def bw(g):
        return (sum_to(g, orig),)

    return result_tensor(np.broadcast_to(a.data, shape), (a,), bw, "expand")


def concat(tensors, axis=0):
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_pair(tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for k in range(len(sizes)):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(getslice(g, tuple(key)))
        return tuple(outs)

    return result_tensor(data, tuple(tensors), bw, "concat")


def getslice(a: Tensor, key):
    orig = a.shape

    def bw(g):
        return (embed_slice(g, orig, key),)

    return result_tensor(a.data[key], (a,), bw, "slice")


def embed_slice(g: Tensor, shape, key):
    """Adjoint of ``getslice``: place ``g`` into zeros of ``shape`` at ``key``."""
    shape = tuple(shape)

    def bw(gg):
        return (getslice(gg, key),)

    data = np.zeros(shape, dtype=g.dtype)
    data[key] = g.data
    return result_tensor(data, (g,), bw, "embed_slice")


def pad(a: Tensor, pad_width):
    """Zero padding; ``pad_width`` is the numpy per-axis (before, after) spec."""
    pad_width = tuple((int(b), int(e)) for b, e in pad_width)
    key = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.shape))

    def bw(g):
        return (getslice(g, key),)

    return result_tensor(np.pad(a.data, pad_width), (a,), bw, "pad")


def take(a: Tensor, indices, axis=0):
    indices = np.asarray(indices, dtype=np.intp)
    dim = a.shape[axis]

    def bw(g):
        return (scatter_add(g, indices, axis, dim),)

    return result_tensor(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def scatter_add(g: Tensor, indices, axis, dim):
    """Adjoint of ``take``: accumulate rows of ``g`` at ``indices``."""
    indices = np.asarray(indices, dtype=np.intp)
    out_shape = list(g.shape)
    out_shape[axis] = int(dim)
    data = np.zeros(out_shape, dtype=g.dtype)
    if axis == 0:
        np.add.at(data, indices, g.data)
    else:
        mv = np.moveaxis(data, axis, 0)
        np.add.at(mv, indices, np.moveaxis(g.data, axis, 0))

    def bw(gg):
        return (take(gg, indices, axis=axis),)

    return result_tensor(data, (g,), bw, "scatter_add")


# -- reductions --------------------------------------------------------------

def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def tsum(a: Tensor, axis=None, keepdims=False):
    orig = a.shape
    kshape = _keepdims_shape(orig, axis)

    def bw(g):
        if tuple(g.shape) != kshape:
            g = reshape(g, kshape)
        return (expand(g, orig),)

    return result_tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False):
    orig = a.shape
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= orig[ax % len(orig)]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max_axis(a: Tensor, axis: int, keepdims=False):
    axis = axis % a.ndim
    data = np.max(a.data, axis=axis, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axis)

    def bw(g):
        idx = np.argmax(a.data, axis=axis)
        onehot = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis)
        if tuple(g.shape) != kshape:
            g = reshape(g, kshape)
        return (mul(expand(g, a.shape), Tensor(onehot)),)

    return result_tensor(data, (a,), bw, "max_axis")


def channel_sum(a: Tensor):
    """Sum a [B, C, H, W] tensor over batch and space -> [C]."""
    c = a.shape[1]

    def bw(g):
        return (expand(reshape(g, (1, c, 1, 1)), a.shape),)

    return result_tensor(kernels.channel_sum(_contig(a.data)), (a,), bw, "channel_sum")


def channel_dot(a: Tensor, b: Tensor):
    """Per-channel inner product of two [B, C, H, W] tensors -> [C]."""
    _check_pair(a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"channel_dot shapes {a.shape} vs {b.shape}")
    c = a.shape[1]

    def bw(g):
        g4 = expand(reshape(g, (1, c, 1, 1)), a.shape)
        return (mul(g4, b), mul(g4, a))

    return result_tensor(kernels.channel_dot(_contig(a.data), _contig(b.data)),
                         (a, b), bw, "channel_dot")


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor):
    """x * scale[c] + shift[c] over [B, C, H, W], in one fused pass."""
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeMismatchError("channel_affine needs [C] scale and shift")
    _check_pair(x, scale)

    def bw(g):
        zero = Tensor(np.zeros(c, dtype=x.dtype))
        return (channel_affine(g, scale, zero), channel_dot(g, x), channel_sum(g))

    return result_tensor(kernels.affine_channels(_contig(x.data), _contig(scale.data),
                                                 _contig(shift.data)),
                         (x, scale, shift), bw, "channel_affine")


# -- linear algebra ----------------------------------------------------------

def _swap_last(t: Tensor):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


def matmul(a: Tensor, b: Tensor):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul needs ndim >= 2 operands")
    _check_pair(a, b)
    data = _binary_data(np.matmul, a.data, b.data, "matmul")

    def bw(g):
        ga = sum_to(matmul(g, _swap_last(b)), a.shape)
        gb = sum_to(matmul(_swap_last(a), g), b.shape)
        return (ga, gb)

    return result_tensor(data, (a, b), bw, "matmul")


# -- composites --------------------------------------------------------------

def softmax(a: Tensor, axis: int = 1):
    """Softmax along ``axis``; the stabilizing max shift is a constant."""
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, Tensor(shift)))
    return div(e, tsum(e, axis=axis, keepdims=True))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               mean=None, var=None):
    """Normalize [B, C, H, W] activations per channel.

    With ``mean``/``var`` omitted the statistics of the current batch are
    used (training mode and test-batch-stats inference); pass stored running
    statistics (numpy arrays of shape [C]) for running-stats inference.
    Returns ``(y, batch_mean, batch_var)`` with the statistics detached.

    The batch variance is the uncentered form E[x^2] - E[x]^2, clipped at
    zero against float32 cancellation, and the normalization is applied as a
    single per-channel affine map (two full-size passes).
    """
    c = x.shape[1]
    n = x.size // c
    if mean is None:
        mu = mul(channel_sum(x), 1.0 / n)
        ms = mul(channel_dot(x, x), 1.0 / n)
        v = maximum_scalar(sub(ms, square(mu)), 0.0)
        stat_mean = mu.data.copy()
        stat_var = v.data.copy()
    else:
        mu = Tensor(np.asarray(mean, dtype=x.dtype).reshape(c))
        v = Tensor(np.asarray(var, dtype=x.dtype).reshape(c))
        stat_mean = mu.data
        stat_var = v.data
    scale = mul(gamma, pow_const(add(v, eps), -0.5))
    shift = sub(beta, mul(mu, scale))
    y = channel_affine(x, scale, shift)
    return y, stat_mean, stat_var


# -- operator wiring ---------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__pow__ = pow_const
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getslice
Tensor.reshape = reshape
Tensor.transpose = transpose
Tensor.sum = tsum
Tensor.mean = tmean
