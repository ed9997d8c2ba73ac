"""JIT-compiled kernels for the hot spatial and pointwise operations.

Stride-1 convolutions run as flattened fused-multiply-add loops over the
padded row width: for each (channel, kernel-offset) pair the whole output
plane is one long unit-stride loop against an L1-resident accumulator, which
LLVM vectorizes.  The few columns falling in the horizontal padding are
computed and discarded (or arrive as zeros on the gradient side), keeping
the loops branch-free.

Each parallel task owns its output slice, so results are deterministic for
any thread count.  Kernels are generic over kernel size and float32/float64.
Strided and rectangular variants route through the im2col composition
instead (see conv.py).
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_JIT = dict(parallel=True, fastmath=True, cache=True, nogil=True)


@njit(**_JIT)
def conv_fwd1(xp, w, oh, ow):
    """Stride-1 conv. xp: padded [B, Ci, Hp, Wp]; w: [Co, Ci, kh, kw]."""
    bn, ci_n, hp, wp = xp.shape
    co_n, _, kh, kw = w.shape
    n = oh * wp
    y = np.empty((bn, co_n, oh, ow), dtype=xp.dtype)
    for bc in prange(bn * co_n):
        b = bc // co_n
        co = bc % co_n
        tmp = np.zeros(n, dtype=xp.dtype)
        for ci in range(ci_n):
            xf = xp[b, ci].reshape(hp * wp)
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    off = ki * wp + kj
                    for t in range(n):
                        tmp[t] += wv * xf[t + off]
        for i in range(oh):
            base = i * wp
            for j in range(ow):
                y[b, co, i, j] = tmp[base + j]
    return y


@njit(**_JIT)
def conv_xgrad1(gp, w, hp, wp):
    """Stride-1 scatter adjoint onto the padded input grid [B, Ci, hp, wp].

    ``gp`` is the output gradient embedded into padded-width rows
    [B, Co, oh, wp] (zero in the pad columns).
    """
    bn, co_n, oh, _ = gp.shape
    _, ci_n, kh, kw = w.shape
    n = oh * wp
    gx = np.empty((bn, ci_n, hp, wp), dtype=gp.dtype)
    for bc in prange(bn * ci_n):
        b = bc // ci_n
        ci = bc % ci_n
        tmp = np.zeros(hp * wp, dtype=gp.dtype)
        for co in range(co_n):
            gf = gp[b, co].reshape(n)
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    off = ki * wp + kj
                    for t in range(n):
                        tmp[t + off] += wv * gf[t]
        gx[b, ci] = tmp.reshape(hp, wp)
    return gx


@njit(**_JIT)
def conv_wgrad1(xp, gp, kh, kw):
    """Stride-1 weight gradient [Co, Ci, kh, kw] from padded input and the
    padded-width-embedded output gradient."""
    bn, ci_n, hp, wp = xp.shape
    co_n, oh = gp.shape[1], gp.shape[2]
    n = oh * wp
    gw = np.empty((co_n, ci_n, kh, kw), dtype=gp.dtype)
    for cc in prange(co_n * ci_n):
        co = cc // ci_n
        ci = cc % ci_n
        local = np.zeros((kh, kw), dtype=gp.dtype)
        for b in range(bn):
            xf = xp[b, ci].reshape(hp * wp)
            gf = gp[b, co].reshape(n)
            for ki in range(kh):
                for kj in range(kw):
                    off = ki * wp + kj
                    acc = 0.0
                    for t in range(n):
                        acc += gf[t] * xf[t + off]
                    local[ki, kj] += acc
        for ki in range(kh):
            for kj in range(kw):
                gw[co, ci, ki, kj] = local[ki, kj]
    return gw


@njit(**_JIT)
def affine_channels(x, scale, shift):
    """x * scale[c] + shift[c] in one pass over [B, C, H, W]."""
    bn, cn, hn, wn = x.shape
    y = np.empty_like(x)
    m = hn * wn
    for bc in prange(bn * cn):
        b = bc // cn
        c = bc % cn
        sc = scale[c]
        sh = shift[c]
        xf = x[b, c].reshape(m)
        yf = y[b, c].reshape(m)
        for t in range(m):
            yf[t] = xf[t] * sc + sh
    return y


@njit(**_JIT)
def masked_grad(g, x, thresh):
    """g where x > thresh else 0, in one pass (relu/hinge backward)."""
    n = g.size
    gf = g.reshape(n)
    xf = x.reshape(n)
    out = np.empty(n, dtype=g.dtype)
    for i in prange(n):
        out[i] = gf[i] if xf[i] > thresh else 0.0
    return out.reshape(g.shape)


@njit(**_JIT)
def add_relu(a, b):
    """max(a + b, 0) in one pass."""
    n = a.size
    af = a.reshape(n)
    bf = b.reshape(n)
    out = np.empty(n, dtype=a.dtype)
    for i in prange(n):
        v = af[i] + bf[i]
        out[i] = v if v > 0.0 else 0.0
    return out.reshape(a.shape)


def warmup(dtype=np.float32):
    """Compile the kernels for one dtype (first call in a process)."""
    xp = np.zeros((1, 1, 6, 6), dtype=dtype)
    w = np.zeros((1, 1, 3, 3), dtype=dtype)
    y = conv_fwd1(xp, w, 4, 4)
    gp = np.zeros((1, 1, 4, 6), dtype=dtype)
    conv_xgrad1(gp, w, 6, 6)
    conv_wgrad1(xp, gp, 3, 3)
    one = np.ones(1, dtype=dtype)
    affine_channels(xp, one, one)
    masked_grad(xp, xp, 0.0)
    add_relu(xp, xp)
