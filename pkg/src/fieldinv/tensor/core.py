"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation is a :class:`Function`.  Its ``forward`` works
on raw arrays; its ``backward`` is written with the same tensor operations,
so running a backward pass with ``create_graph=True`` records a second graph
that can itself be differentiated (needed for gradient penalties).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Optional, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for errors raised by the tensor engine."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class NumericError(TensorError, FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite values in output (numeric overflow)")


class GraphError(TensorError, RuntimeError):
    pass


_state = threading.local()
_default_dtype = np.float64


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return grad_mode(False)


def set_default_dtype(dtype) -> None:
    """Select float64 (gradient checks) or float32 (training) for new tensors."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense array that can take part in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._fn: Optional[Function] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; the implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One node of the graph.

    Subclasses set ``tag`` and implement ``forward`` on arrays and
    ``backward`` on tensors.  Keyword arguments passed to :meth:`apply`
    become attributes before ``forward`` runs.
    """

    tag = "op"

    def __init__(self):
        self.inputs: tuple = ()
        self.needs: tuple = ()
        self.released = False

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Sequence[Optional[Tensor]]:
        raise NotImplementedError

    def release(self) -> None:
        self.inputs = ()
        self.released = True
        for key in [k for k in vars(self) if k.startswith("saved")]:
            setattr(self, key, None)

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        fn = cls()
        for key, value in attrs.items():
            setattr(fn, key, value)
        tensors = tuple(as_tensor(x) for x in inputs)
        with np.errstate(all="ignore"):
            out = fn.forward(*(t.data for t in tensors))
            out = np.asarray(out, dtype=_default_dtype)
            finite = np.isfinite(np.sum(out)) or np.isfinite(out).all()
        if not finite:
            raise NumericError(cls.tag)
        result = Tensor(out)
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            fn.inputs = tensors
            result.requires_grad = True
            result._fn = fn
        return result


def _ops():
    from . import ops

    return ops


def _topo_order(root: Tensor) -> list:
    """Non-leaf tensors reachable from ``root``, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if t._fn is None:
            continue
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._fn.released:
            raise GraphError(
                "backward through a graph whose buffers were already freed; "
                "pass retain_graph=True to the first backward call"
            )
        stack.append((t, True))
        for inp in t._fn.inputs:
            if inp._fn is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def graph_nodes(root: Tensor) -> list:
    """Op records of the graph ending at ``root`` in topological order."""
    return [(t._fn.tag, t) for t in _topo_order(root)]


def _run_backward(root, seed, targets, create_graph, retain_graph):
    order = _topo_order(root)
    target_ids = None if targets is None else {id(t) for t in targets}

    # forward reachability: which tensors lie on a path to a wanted target
    needed = {}

    def wants(t):
        if t._fn is None:
            if target_ids is None:
                return t.requires_grad
            return id(t) in target_ids
        if target_ids is not None and id(t) in target_ids:
            return True
        return needed.get(id(t), False)

    for t in order:
        needed[id(t)] = any(wants(inp) for inp in t._fn.inputs)

    grads = {id(root): seed}
    leaf_grads = {}
    with grad_mode(create_graph):
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None or not needed[id(t)]:
                continue
            if target_ids is not None and id(t) in target_ids:
                _accumulate(leaf_grads, t, g)
            fn = t._fn
            fn.needs = tuple(wants(inp) for inp in fn.inputs)
            in_grads = fn.backward(g)
            for inp, gi, need in zip(fn.inputs, in_grads, fn.needs):
                if gi is None or not need:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{fn.tag}.backward", gi.shape, inp.shape)
                if inp._fn is None:
                    _accumulate(leaf_grads, inp, gi)
                else:
                    _accumulate(grads, inp, gi)
    if not retain_graph:
        for t in order:
            t._fn.release()
    return leaf_grads


def _accumulate(store, t, g):
    key = id(t)
    store[key] = store[key] + g if key in store else g


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf that requires grad and reaches ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  The graph is freed
    afterwards unless ``retain_graph`` is set; a second call then raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._fn is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    seed = Tensor(np.ones_like(loss.data))
    leaves = _collect_leaves(loss)
    result = _run_backward(loss, seed, None, False, retain_graph)
    for leaf in leaves:
        g = result.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def _collect_leaves(root: Tensor) -> list:
    leaves, seen = [], set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._fn is None:
            if t.requires_grad:
                leaves.append(t)
            continue
        stack.extend(t._fn.inputs)
    return leaves


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output: Optional[Tensor] = None,
    create_graph: bool = False,
    retain_graph: Optional[bool] = None,
) -> list:
    """Return d(output)/d(input) for each input without touching ``.grad``.

    Inputs that ``output`` does not depend on get ``None``.  With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    inputs = list(inputs)
    if retain_graph is None:
        retain_graph = create_graph
    if grad_output is None:
        if output.size != 1:
            raise GraphError(f"grad needs a scalar output or grad_output, got {output.shape}")
        grad_output = Tensor(np.ones_like(output.data))
    if output._fn is None:
        return [Tensor(np.ones_like(output.data)) if x is output else None for x in inputs]
    result = _run_backward(output, as_tensor(grad_output), inputs, create_graph, retain_graph)
    return [result.get(id(x)) for x in inputs]
