"""Parameter containers, layers, RMSProp and spectral normalization."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .core import Parameter, ShapeError, Tensor, get_default_dtype


class Module:
    """Walks attributes in definition order to find parameters and buffers."""

    training = True

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, PowerIteration):
                yield f"{prefix}{name}.u", value.u
                yield f"{prefix}{name}.v", value.v
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"load {name}", state[name].shape, p.shape)
            p.data = np.array(state[name], dtype=get_default_dtype())
        for module_prefix, pi in self._power_iterations():
            pi.u = np.array(state[module_prefix + ".u"], dtype=np.float64)
            pi.v = np.array(state[module_prefix + ".v"], dtype=np.float64)

    def _power_iterations(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, PowerIteration):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child._power_iterations(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def cast(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_hash(module: Module) -> str:
    """SHA-256 over every parameter and buffer, in definition order."""
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# spectral normalization


# a cold start needs many iterations when the top singular values are close
WARMUP_ITERS = 100
# per-step refresh: iterate until sigma settles; one step is not enough after large updates
SN_MAX_ITERS = 30
SN_TOL = 1e-6


@dataclass
class PowerIteration:
    """Persistent singular-vector estimates for one weight matrix."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, rows: int, cols: int, rng: np.random.Generator) -> "PowerIteration":
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v))

    @classmethod
    def for_weight(cls, weight: Tensor, rng: np.random.Generator, warmup: int = WARMUP_ITERS) -> "PowerIteration":
        """State for ``weight`` after ``warmup`` iterations from a random start."""
        rows = weight.shape[0]
        state = cls.init(rows, weight.size // rows, rng)
        spectral_normalize(weight, state, iters=warmup)
        return state


def _unit(x):
    n = np.linalg.norm(x)
    return x / n, n


def spectral_normalize(weight: Tensor, state: PowerIteration, iters: int = 1, update: bool = True,
                       tol: float | None = None) -> Tensor:
    """Return ``weight / sigma`` with sigma from power iteration.

    Conv weights are flattened to (out, rest).  The singular vectors are
    refreshed up to ``iters`` times when ``update`` is set, stopping early
    once the sigma estimate moves by less than ``tol`` (relative).  They are
    treated as constants for differentiation.  An all-zero weight is
    returned as is.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mat = weight.data.reshape(weight.shape[0], -1).astype(np.float64)
    if not np.any(mat):
        return weight
    u, v = state.u, state.v
    if update:
        prev = None
        for _ in range(iters):
            v, nv = _unit(mat.T @ u)
            u, nu = _unit(mat @ v)
            if nv == 0 or nu == 0:
                return weight
            if tol is not None and prev is not None and abs(nu - prev) <= tol * nu:
                break
            prev = nu
        state.u, state.v = u, v
    dt = get_default_dtype()
    outer = Tensor(np.outer(u, v).reshape(weight.shape).astype(dt))
    sigma = ops.sum(ops.mul(weight, outer))
    return ops.div(weight, sigma)


def estimate_sigma(mat: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    """Largest singular value by a fresh power iteration (diagnostics)."""
    mat = np.asarray(mat, dtype=np.float64).reshape(mat.shape[0], -1)
    u = np.random.default_rng(seed).standard_normal(mat.shape[0])
    u /= np.linalg.norm(u)
    sigma = 0.0
    for _ in range(iters):
        v, _ = _unit(mat.T @ u)
        u, sigma = _unit(mat @ v)
    return float(sigma)


# --------------------------------------------------------------------------
# layers


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 spectral: bool = False, gain: float = 1.0):
        bound = gain * np.sqrt(6.0 / n_in) / np.sqrt(2.0)
        # stored (in, out) so forward is x @ W
        self.weight = Parameter(_uniform(rng, (n_in, n_out), bound))
        self.bias = Parameter(np.zeros(n_out)) if bias else None
        self.sn = PowerIteration.for_weight(self.weight, rng) if spectral else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return spectral_normalize(self.weight, self.sn, iters=SN_MAX_ITERS, update=self.training, tol=SN_TOL)

    def forward(self, x):
        return ops.linear(x, self.effective_weight(), self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3,
                 bias: bool = True, spectral: bool = False, gain: float = 1.0):
        fan_in = c_in * k * k
        bound = gain * np.sqrt(6.0 / fan_in) / np.sqrt(2.0)
        self.weight = Parameter(_uniform(rng, (c_out, c_in, k, k), bound))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.sn = PowerIteration.for_weight(self.weight, rng) if spectral else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return spectral_normalize(self.weight, self.sn, iters=SN_MAX_ITERS, update=self.training, tol=SN_TOL)

    def forward(self, x):
        return ops.conv2d(x, self.effective_weight(), self.bias)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class RMSProp:
    """RMSProp with a running mean-square accumulator per parameter."""

    params: list
    lr: float
    decay: float = 0.99
    eps: float = 1e-8
    accumulators: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0 or not 0 < self.decay < 1 or self.eps <= 0:
            raise ValueError("invalid RMSProp hyperparameters")
        if not self.accumulators:
            self.accumulators = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = [p.grad for p in self.params] if grads is None else grads
        rmsprop_step(self.params, grads, self)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def rmsprop_step(params, grads, state: RMSProp) -> None:
    """acc <- decay*acc + (1-decay)*g^2;  p <- p - lr*g/(sqrt(acc)+eps)."""
    if len(params) != len(grads) or len(params) != len(state.accumulators):
        raise ValueError("params, grads and accumulators must align")
    for p, g, acc in zip(params, grads, state.accumulators):
        if g is None:
            continue
        if g.shape != p.shape or acc.shape != p.shape:
            raise ShapeError("rmsprop_step", p.shape, g.shape)
        acc *= state.decay
        acc += (1.0 - state.decay) * g * g
        p.data = p.data - (state.lr * g / (np.sqrt(acc) + state.eps)).astype(p.data.dtype)
