"""Dense-tensor computation graph with reverse-mode differentiation.

Every differentiable operation records a node holding its parent tensors and
a backward rule.  Backward rules are themselves written in terms of tensor
operations, so a gradient pass run with ``create_graph=True`` appends its
backward computation to the tape as new differentiable nodes; a second
gradient pass then differentiates through the first one (gradients of
gradients, as the meta-update needs).

Tensors are value-semantic wrappers around contiguous float32/float64 numpy
arrays.  Graphs are built eagerly and single-threaded; independent graphs may
live on separate threads.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import DTypeMismatchError, NonFiniteError, ShapeMismatchError, TapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.paranoid_finite_checks = False


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = bool(mode)
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def paranoid_finite_checks():
    """Check every primitive's output for NaN/Inf (slow; for tests)."""
    prev = _state.paranoid_finite_checks
    _state.paranoid_finite_checks = True
    try:
        yield
    finally:
        _state.paranoid_finite_checks = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


class Node:
    """One recorded operation: parent tensors plus the rule that maps the
    output gradient to parent gradients."""

    __slots__ = ("parents", "backward", "name")

    def __init__(self, parents, backward, name):
        self.parents = parents
        self.backward = backward
        self.name = name


class Tensor:
    """A dense float tensor, optionally attached to the differentiation tape.

    ``requires_grad`` marks a *leaf* whose gradient may be requested.  Results
    of operations carry a ``node`` instead; a tensor participates in backprop
    if either is set.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- bookkeeping ------------------------------------------------------

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

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, off the tape (shares storage)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.node = None
        return t

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self, requires_grad=None) -> "Tensor":
        t = Tensor(self.data.copy())
        t.requires_grad = self.requires_grad if requires_grad is None else requires_grad
        return t

    def __repr__(self):
        tag = "leaf" if self.node is None else self.node.name
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, {tag})"

    def __len__(self):
        return self.data.shape[0]

    # Arithmetic operators are attached by shapemeta.autodiff.ops.


def result_tensor(data: np.ndarray, parents, backward, name: str) -> Tensor:
    """Wrap an op result; records a node when tracking is active."""
    if _state.paranoid_finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in output of '{name}'")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.node = None
    if _state.grad_enabled:
        for p in parents:
            if p is not None and (p.requires_grad or p.node is not None):
                t.node = Node(parents, backward, name)
                break
    return t


def check_finite(t, context: str = "value"):
    """Raise NonFiniteError if any entry of ``t`` is NaN/Inf."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in {context}")
    return t


def _topo_order(root: Tensor):
    """Iterative post-order over the graph reachable from ``root``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p is not None and p.node is not None and id(p) not in seen:
                    stack.append((p, False))
                elif p is not None and p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    order.append(p)
    return order


def gradient(output: Tensor, wrt, create_graph: bool = False,
             retain_graph: bool = True, check=True):
    """Reverse-mode gradients of a scalar ``output`` w.r.t. leaf tensors.

    With ``create_graph=True`` the returned gradients are themselves on the
    tape, so a further ``gradient`` call differentiates through them.
    Graphs persist across passes by default; ``retain_graph=False`` drops
    backward records as they run so saved buffers free early (use only on
    the last pass that will touch the graph).

    Returns a list of tensors shaped like the corresponding ``wrt`` entries
    (zeros where ``output`` does not depend on the input).
    """
    from . import ops  # deferred: ops imports this module

    if not isinstance(output, Tensor):
        raise TapeError("output must be a Tensor")
    if output.data.size != 1:
        raise TapeError(f"gradient needs a scalar output, got shape {tuple(output.shape)}")
    if not output.tracked:
        raise TapeError("output is not on the tape (no tracked inputs)")
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Tensor) or not w.requires_grad or w.node is not None:
            raise TapeError("every wrt tensor must be a leaf with requires_grad=True")
    if create_graph:
        retain_graph = True

    grads: dict[int, Tensor] = {}
    seed = Tensor(np.ones((), dtype=output.dtype)) if output.ndim == 0 else \
        Tensor(np.ones(output.shape, dtype=output.dtype))
    grads[id(output)] = seed

    order = _topo_order(output)
    with set_grad_enabled(create_graph):
        for t in reversed(order):
            node = t.node
            if node is None:
                continue
            g = grads.pop(id(t), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if p is None or pg is None or not (p.requires_grad or p.node is not None):
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else ops.add(acc, pg)
            if not retain_graph:
                t.node = None

    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros(w.shape, dtype=w.dtype))
        if check:
            check_finite(g, "gradient")
        out.append(g)
    return out
