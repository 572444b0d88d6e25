"""Finite-difference gradient checking and input gradients."""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, grad


class InputIndependentWarning(UserWarning):
    pass


def input_gradient(scalar_out: Tensor, input_image: Tensor, create_graph: bool = True) -> Tensor:
    """d(scalar_out)/d(input_image), differentiable w.r.t. the network weights.

    ``scalar_out`` may be a batch of per-image outputs; their sum is
    differentiated, which gives every image its own gradient.  When the
    output does not depend on the input a zero tensor is returned with
    ``independent`` set and a warning emitted.
    """
    total = scalar_out if scalar_out.size == 1 else scalar_out.sum()
    (g,) = grad(total, [input_image], create_graph=create_graph)
    if g is None:
        warnings.warn("output does not depend on the input", InputIndependentWarning, stacklevel=2)
        g = Tensor(np.zeros_like(input_image.data))
        g.independent = True
    else:
        g.independent = False
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                       indices: Sequence | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x`` (mutated in place)."""
    out = np.zeros_like(x, dtype=np.float64)
    it = indices if indices is not None else np.ndindex(*x.shape)
    for idx in it:
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backward and central differences.

    ``fn`` maps the input tensors to a scalar tensor.  With ``max_entries``,
    only a random subset of coordinates per input is probed.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        idx = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, t.shape) for i in flat]

        def f():
            return float(fn(*[Tensor(s.data) for s in inputs]).data)

        num = numerical_gradient(f, t.data, h=h, indices=idx)
        ana = np.zeros_like(num) if t.grad is None else t.grad
        if idx is not None:
            num = np.array([num[i] for i in idx])
            ana = np.array([ana[i] for i in idx])
        worst = max(worst, relative_error(ana, num))
    return worst
