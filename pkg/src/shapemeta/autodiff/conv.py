"""Spatial operations: convolution, transposed convolution, pooling, resize.

Two interchangeable convolution routes exist:

* the default direct route, backed by JIT kernels (``kernels.py``), whose
  backward rules form a closed triad — conv backward is a transposed conv
  plus a weight-correlation, and each of those is again expressed in the
  same primitives, so second-order passes work;
* an im2col/col2im + matmul composition (``*_via_unfold``), slower but
  written only with the generic linear primitives.  It serves as the
  independent cross-check of the direct route and as the fallback for
  non-square stride/padding.

Pooling composes im2col with axis reductions; bilinear resize is a linear
primitive pair with half-pixel-center sampling.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError
from .tensor import Tensor, result_tensor
from . import kernels, ops

__all__ = [
    "im2col", "col2im", "conv2d", "conv_transpose2d", "conv2d_via_unfold",
    "conv_transpose2d_via_unfold", "max_pool2d", "avg_pool2d",
    "bilinear_resize", "bilinear_resize_adjoint",
]


def _out_size(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _pad_spatial(xd, ph, pw):
    if not (ph or pw):
        return xd
    b, c, h, w = xd.shape
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = xd
    return out


def _square(v, what):
    a, b = (v, v) if isinstance(v, int) else v
    if a != b:
        raise ShapeMismatchError(f"direct convolution requires square {what}")
    return a


# -- im2col / col2im linear pair ----------------------------------------------

def _im2col_data(xd, kh, kw, sh, sw, ph, pw):
    b, c, h, w = xd.shape
    oh, ow = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    xp = _pad_spatial(xd, ph, pw)
    col = np.empty((b, c, kh * kw, oh, ow), dtype=xd.dtype)
    for ki in range(kh):
        for kj in range(kw):
            col[:, :, ki * kw + kj] = xp[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw]
    return col.reshape(b, c * kh * kw, oh * ow)


def _col2im_data(cd, spatial, kh, kw, sh, sw, ph, pw):
    h, w = spatial
    oh, ow = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    b = cd.shape[0]
    c = cd.shape[1] // (kh * kw)
    col = cd.reshape(b, c, kh * kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cd.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += col[:, :, ki * kw + kj]
    if ph or pw:
        return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])
    return xp


def im2col(x: Tensor, kh, kw, sh, sw, ph, pw):
    """Extract sliding patches: [B, C, H, W] -> [B, C*kh*kw, OH*OW]."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"im2col expects a 4-D tensor, got {tuple(x.shape)}")
    spatial = x.shape[2:]

    def bw(g):
        return (col2im(g, spatial, kh, kw, sh, sw, ph, pw),)

    return result_tensor(_im2col_data(x.data, kh, kw, sh, sw, ph, pw), (x,), bw, "im2col")


def col2im(col: Tensor, spatial, kh, kw, sh, sw, ph, pw):
    """Adjoint of ``im2col``: scatter-add patches back onto the image grid."""
    spatial = tuple(int(s) for s in spatial)

    def bw(g):
        return (im2col(g, kh, kw, sh, sw, ph, pw),)

    return result_tensor(_col2im_data(col.data, spatial, kh, kw, sh, sw, ph, pw),
                         (col,), bw, "col2im")


# -- direct convolution triad --------------------------------------------------

def _conv_shapes(x, w, stride, padding, transposed=False):
    s = _square(stride, "stride")
    p = _square(padding, "padding")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError("convolution operands must be 4-D")
    return s, p


def _conv2d_raw(x: Tensor, w: Tensor, s: int, p: int):
    ops._check_pair(x, w)
    cout, cin, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeMismatchError(f"conv2d: {x.shape[1]} input channels vs kernel {cin}")
    bsz, _, h, wd = x.shape
    oh, ow = _out_size(h, kh, s, p), _out_size(wd, kw, s, p)
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError("conv2d: kernel larger than padded input")
    data = kernels.conv_fwd(_pad_spatial(x.data, p, p), w.data, s, oh, ow)

    def bw(g):
        gx = _convT_raw(g, w, s, p, (h, wd))
        gw = _conv_wgrad(x, g, (kh, kw), s, p)
        return (gx, gw)

    return result_tensor(data, (x, w), bw, "conv2d")


def _convT_raw(y: Tensor, v: Tensor, s: int, p: int, out_spatial):
    ops._check_pair(y, v)
    cin, cout, kh, kw = v.shape
    if y.shape[1] != cin:
        raise ShapeMismatchError(f"conv_transpose2d: {y.shape[1]} channels vs kernel {cin}")
    ho, wo = out_spatial
    hp, wp = ho + 2 * p, wo + 2 * p
    gxp = kernels.conv_xgrad(y.data, v.data, s, hp, wp)
    data = np.ascontiguousarray(gxp[:, :, p:p + ho, p:p + wo]) if p else gxp

    def bw(g):
        gy = _conv_fwd_gather(g, v, s, p, y.shape[2:])
        gv = _convT_wgrad(y, g, (kh, kw), s, p)
        return (gy, gv)

    return result_tensor(data, (y, v), bw, "conv_transpose2d")


def _conv_fwd_gather(h: Tensor, v: Tensor, s: int, p: int, out_spatial):
    """Gather pass of the transposed-conv backward: channels follow the
    [Cin, Cout] kernel layout of ``v``."""
    oh, ow = out_spatial
    data = kernels.conv_fwd(_pad_spatial(h.data, p, p), v.data, s, oh, ow)

    def bw(g):
        gh = _convT_raw(g, v, s, p, h.shape[2:])
        gv = _conv_wgrad(h, g, (v.shape[2], v.shape[3]), s, p)
        return (gh, gv)

    return result_tensor(data, (h, v), bw, "convT_input_grad")


def _conv_wgrad(x: Tensor, g: Tensor, kshape, s: int, p: int):
    """Weight gradient of conv2d: [C_g, C_x, kh, kw]."""
    kh, kw = kshape
    data = kernels.conv_wgrad(_pad_spatial(x.data, p, p), g.data, kh, kw, s)

    def bw(wt):
        gx = _convT_raw(g, wt, s, p, x.shape[2:])
        gg = _conv2d_raw(x, wt, s, p)
        return (gx, gg)

    return result_tensor(data, (x, g), bw, "conv_wgrad")


def _convT_wgrad(y: Tensor, h: Tensor, kshape, s: int, p: int):
    """Weight gradient of conv_transpose2d: [C_y, C_h, kh, kw]."""
    kh, kw = kshape
    data = kernels.conv_wgrad(_pad_spatial(h.data, p, p), y.data, kh, kw, s)

    def bw(vt):
        gy = _conv_fwd_gather(h, vt, s, p, y.shape[2:])
        gh = _convT_raw(y, vt, s, p, h.shape[2:])
        return (gy, gh)

    return result_tensor(data, (y, h), bw, "convT_wgrad")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0):
    """2-D cross-correlation. x: [B, Cin, H, W], w: [Cout, Cin, kh, kw]."""
    try:
        s, p = _conv_shapes(x, w, stride, padding)
    except ShapeMismatchError:
        return conv2d_via_unfold(x, w, b, stride, padding)
    y = _conv2d_raw(x, w, s, p)
    if b is not None:
        y = ops.add(y, ops.reshape(b, (1, w.shape[0], 1, 1)))
    return y


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1,
                     padding=0, out_spatial=None):
    """2-D transposed convolution. x: [B, Cin, H, W], w: [Cin, Cout, kh, kw]."""
    try:
        s, p = _conv_shapes(x, w, stride, padding, transposed=True)
    except ShapeMismatchError:
        return conv_transpose2d_via_unfold(x, w, b, stride, padding)
    if out_spatial is None:
        out_spatial = ((x.shape[2] - 1) * s + w.shape[2] - 2 * p,
                       (x.shape[3] - 1) * s + w.shape[3] - 2 * p)
    y = _convT_raw(x, w, s, p, out_spatial)
    if b is not None:
        y = ops.add(y, ops.reshape(b, (1, w.shape[1], 1, 1)))
    return y


# -- unfold-composition route (cross-check / non-square fallback) -------------

def conv2d_via_unfold(x: Tensor, w: Tensor, b: Tensor | None = None,
                      stride=1, padding=0):
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    cout, cin, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeMismatchError(f"conv2d: {x.shape[1]} input channels vs kernel {cin}")
    bsz, _, h, wdim = x.shape
    oh, ow = _out_size(h, kh, sh, ph), _out_size(wdim, kw, sw, pw)
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError("conv2d: kernel larger than padded input")
    col = im2col(x, kh, kw, sh, sw, ph, pw)
    y = ops.matmul(ops.reshape(w, (cout, cin * kh * kw)), col)
    y = ops.reshape(y, (bsz, cout, oh, ow))
    if b is not None:
        y = ops.add(y, ops.reshape(b, (1, cout, 1, 1)))
    return y


def conv_transpose2d_via_unfold(x: Tensor, w: Tensor, b: Tensor | None = None,
                                stride=1, padding=0):
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    cin, cout, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeMismatchError(f"conv_transpose2d: {x.shape[1]} channels vs kernel {cin}")
    bsz, _, h, wdim = x.shape
    hout = (h - 1) * sh + kh - 2 * ph
    wout = (wdim - 1) * sw + kw - 2 * pw
    w2 = ops.transpose(ops.reshape(w, (cin, cout * kh * kw)))
    col = ops.matmul(w2, ops.reshape(x, (bsz, cin, h * wdim)))
    y = col2im(col, (hout, wout), kh, kw, sh, sw, ph, pw)
    if b is not None:
        y = ops.add(y, ops.reshape(b, (1, cout, 1, 1)))
    return y


# -- pooling -------------------------------------------------------------------

def _pool_prep(x: Tensor, k, stride):
    k = (k, k) if isinstance(k, int) else k
    stride = k if stride is None else ((stride, stride) if isinstance(stride, int) else stride)
    bsz, c, h, w = x.shape
    oh, ow = _out_size(h, k[0], stride[0], 0), _out_size(w, k[1], stride[1], 0)
    col = im2col(x, k[0], k[1], stride[0], stride[1], 0, 0)
    col = ops.reshape(col, (bsz, c, k[0] * k[1], oh * ow))
    return col, (bsz, c, oh, ow)


def max_pool2d(x: Tensor, k=2, stride=None):
    col, oshape = _pool_prep(x, k, stride)
    return ops.reshape(ops.max_axis(col, axis=2), oshape)


def avg_pool2d(x: Tensor, k=2, stride=None):
    col, oshape = _pool_prep(x, k, stride)
    return ops.reshape(ops.tmean(col, axis=2), oshape)


# -- bilinear resize ------------------------------------------------------------

_RESIZE_PLANS: dict = {}


def _resize_plan(h, w, oh, ow):
    key = (h, w, oh, ow)
    plan = _RESIZE_PLANS.get(key)
    if plan is None:
        def axis_plan(n_in, n_out):
            src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
            src = np.clip(src, 0.0, n_in - 1.0)
            i0 = np.floor(src).astype(np.intp)
            i1 = np.minimum(i0 + 1, n_in - 1)
            frac = src - i0
            return i0, i1, frac
        y0, y1, fy = axis_plan(h, oh)
        x0, x1, fx = axis_plan(w, ow)
        plan = (y0, y1, fy, x0, x1, fx)
        _RESIZE_PLANS[key] = plan
    return plan


def _resize_data(xd, oh, ow):
    lead = xd.shape[:-2]
    h, w = xd.shape[-2:]
    y0, y1, fy, x0, x1, fx = _resize_plan(h, w, oh, ow)
    xf = xd.reshape(-1, h, w)
    fy = fy.astype(xd.dtype)[None, :, None]
    fx = fx.astype(xd.dtype)[None, None, :]
    top = xf[:, y0][:, :, x0] * (1 - fx) + xf[:, y0][:, :, x1] * fx
    bot = xf[:, y1][:, :, x0] * (1 - fx) + xf[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out.reshape(*lead, oh, ow)


def _resize_adjoint_data(gd, h, w):
    lead = gd.shape[:-2]
    oh, ow = gd.shape[-2:]
    y0, y1, fy, x0, x1, fx = _resize_plan(h, w, oh, ow)
    gf = gd.reshape(-1, oh, ow)
    n = gf.shape[0]
    offs = (np.arange(n, dtype=np.intp) * (h * w))[:, None, None]
    acc = np.zeros(n * h * w, dtype=np.float64)
    wy = (1 - fy)[None, :, None], fy[None, :, None]
    wx = (1 - fx)[None, None, :], fx[None, None, :]
    ys = (y0, y1)
    xs = (x0, x1)
    for a in (0, 1):
        for bb in (0, 1):
            idx = offs + (ys[a][:, None] * w + xs[bb][None, :])[None]
            weights = gf * wy[a] * wx[bb]
            acc += np.bincount(idx.ravel(), weights=weights.ravel(), minlength=n * h * w)
    return acc.reshape(*lead, h, w).astype(gd.dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int):
    """Resize the trailing two axes with half-pixel-center sampling."""
    h, w = x.shape[-2:]

    def bw(g):
        return (bilinear_resize_adjoint(g, h, w),)

    return result_tensor(_resize_data(x.data, out_h, out_w), (x,), bw, "bilinear_resize")


def bilinear_resize_adjoint(g: Tensor, h: int, w: int):
    """Adjoint of ``bilinear_resize`` onto an h x w grid."""
    oh, ow = g.shape[-2:]

    def bw(gg):
        return (bilinear_resize(gg, oh, ow),)

    return result_tensor(_resize_adjoint_data(g.data, h, w), (g,), bw, "bilinear_resize_adj")
