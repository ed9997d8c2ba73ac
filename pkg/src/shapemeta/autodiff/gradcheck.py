"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NonFiniteError, TapeError
from .tensor import Tensor, gradient
from . import ops


def finite_difference_check(output_fn, wrt: Tensor, eps: float = 1e-5,
                            max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``output_fn`` evaluates the scalar objective from the current contents of
    ``wrt`` (a float64 leaf, perturbed in place coordinate by coordinate).
    The relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.  With
    ``max_coords`` set, a seeded random subset of coordinates is probed.
    """
    if wrt.dtype != np.float64:
        raise TapeError("finite_difference_check requires a float64 wrt tensor")
    if not wrt.requires_grad or wrt.node is not None:
        raise TapeError("wrt must be a leaf with requires_grad=True")
    out = output_fn()
    analytic = gradient(out, [wrt])[0].data.reshape(-1)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("non-finite analytic gradient")
    flat = wrt.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)
    worst = 0.0
    for i in coords:
        saved = flat[i]
        flat[i] = saved + eps
        fp = output_fn().item()
        flat[i] = saved - eps
        fm = output_fn().item()
        flat[i] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite value during finite differencing")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
    return float(worst)


@contextlib.contextmanager
def perturbed_backward(op_name: str = "relu", scale: float = 1.001):
    """Deliberately corrupt one op's backward rule (mutation sanity hook)."""
    orig = getattr(ops, op_name)

    def wrapped(*args, **kwargs):
        out = orig(*args, **kwargs)
        if out.node is not None:
            inner = out.node.backward

            def corrupted(g):
                return tuple(None if gg is None else ops.mul(gg, scale)
                             for gg in inner(g))

            out.node.backward = corrupted
        return out

    setattr(ops, op_name, wrapped)
    try:
        yield
    finally:
        setattr(ops, op_name, orig)
