"""Differentiable operations.

Backward rules are composed from the ops in this file, which is what makes
second-order gradients available.  Masks of piecewise-linear activations are
treated as constants, so their second derivative is zero almost everywhere.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .core import Function, ShapeError, Tensor, as_tensor, is_grad_enabled


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# broadcasting helpers


class SumTo(Function):
    tag = "sum_to"

    def forward(self, x):
        self.in_shape = x.shape
        return _sum_to(x, self.shape)

    def backward(self, g):
        return (broadcast_to(g, self.in_shape),)


class BroadcastTo(Function):
    tag = "broadcast_to"

    def forward(self, x):
        self.in_shape = x.shape
        return np.broadcast_to(x, self.shape).copy()

    def backward(self, g):
        return (sum_to(g, self.in_shape),)


def _sum_to(x, shape):
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(x, shape):
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return SumTo.apply(x, shape=tuple(shape))


def broadcast_to(x, shape):
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return BroadcastTo.apply(x, shape=tuple(shape))


# --------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    tag = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    tag = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        gb = sum_to(neg(g), b.shape) if self.needs[1] else None
        return sum_to(g, a.shape), gb


class Mul(Function):
    tag = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(mul(g, b), a.shape) if self.needs[0] else None
        gb = sum_to(mul(g, a), b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    tag = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(div(g, b), a.shape) if self.needs[0] else None
        gb = None
        if self.needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb


class Neg(Function):
    tag = "neg"

    def forward(self, x):
        return -x

    def backward(self, g):
        return (neg(g),)


def _binary(cls, a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(cls.tag, a, b)
    return cls.apply(a, b)


def add(a, b):
    return _binary(Add, a, b)


def sub(a, b):
    return _binary(Sub, a, b)


def mul(a, b):
    return _binary(Mul, a, b)


def div(a, b):
    return _binary(Div, a, b)


def neg(x):
    return Neg.apply(x)


# --------------------------------------------------------------------------
# unary maps


class _Unary(Function):
    def output(self, recompute):
        # a differentiable recomputation is only needed when recording
        if is_grad_enabled():
            return recompute(self.inputs[0])
        return Tensor(self.saved_out)


class Exp(_Unary):
    tag = "exp"

    def forward(self, x):
        self.saved_out = np.exp(x)
        return self.saved_out

    def backward(self, g):
        return (mul(g, self.output(exp)),)


class Log(Function):
    tag = "log"

    def forward(self, x):
        return np.log(x)

    def backward(self, g):
        return (div(g, self.inputs[0]),)


class Sqrt(_Unary):
    tag = "sqrt"

    def forward(self, x):
        self.saved_out = np.sqrt(x)
        return self.saved_out

    def backward(self, g):
        return (div(mul(g, 0.5), self.output(sqrt)),)


class Sin(Function):
    tag = "sin"

    def forward(self, x):
        return np.sin(x)

    def backward(self, g):
        return (mul(g, cos(self.inputs[0])),)


class Cos(Function):
    tag = "cos"

    def forward(self, x):
        return np.cos(x)

    def backward(self, g):
        return (neg(mul(g, sin(self.inputs[0]))),)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(_Unary):
    tag = "sigmoid"

    def forward(self, x):
        self.saved_out = _sigmoid_np(x)
        return self.saved_out

    def backward(self, g):
        s = self.output(sigmoid)
        return (mul(g, mul(s, sub(1.0, s))),)


class Tanh(_Unary):
    tag = "tanh"

    def forward(self, x):
        self.saved_out = np.tanh(x)
        return self.saved_out

    def backward(self, g):
        t = self.output(tanh)
        return (mul(g, sub(1.0, mul(t, t))),)


class Softplus(Function):
    tag = "softplus"

    def forward(self, x):
        return np.logaddexp(0.0, x)

    def backward(self, g):
        return (mul(g, sigmoid(self.inputs[0])),)


class Relu(Function):
    tag = "relu"

    def forward(self, x):
        self.saved_mask = x > 0
        return np.where(self.saved_mask, x, 0.0)

    def backward(self, g):
        return (mul(g, Tensor(self.saved_mask)),)


class LeakyRelu(Function):
    tag = "leaky_relu"
    slope = 0.2

    def forward(self, x):
        self.saved_scale = np.where(x > 0, 1.0, self.slope).astype(x.dtype)
        return x * self.saved_scale

    def backward(self, g):
        return (mul(g, Tensor(self.saved_scale)),)


class Abs(Function):
    tag = "abs"

    def forward(self, x):
        return np.abs(x)

    def backward(self, g):
        return (mul(g, Tensor(np.sign(self.inputs[0].data))),)


class Square(Function):
    tag = "square"

    def forward(self, x):
        return x * x

    def backward(self, g):
        return (mul(g, mul(self.inputs[0], 2.0)),)


class ClampMin(Function):
    tag = "clamp_min"

    def forward(self, x):
        self.saved_mask = x > self.lo
        return np.where(self.saved_mask, x, self.lo)

    def backward(self, g):
        return (mul(g, Tensor(self.saved_mask)),)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def sqrt(x):
    return Sqrt.apply(x)


def sin(x):
    return Sin.apply(x)


def cos(x):
    return Cos.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


def softplus(x):
    return Softplus.apply(x)


def relu(x):
    return Relu.apply(x)


def leaky_relu(x, slope=0.2):
    return LeakyRelu.apply(x, slope=slope)


def abs(x):  # noqa: A001 - mirrors numpy naming
    return Abs.apply(x)


def square(x):
    return Square.apply(x)


def clamp_min(x, lo):
    return ClampMin.apply(x, lo=lo)


# --------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    tag = "sum"

    def forward(self, x):
        self.in_shape = x.shape
        return x.sum(axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        kept = list(self.in_shape)
        for a in self.axes:
            kept[a] = 1
        return (broadcast_to(reshape(g, tuple(kept)), self.in_shape),)


class Mean(Function):
    tag = "mean"

    def forward(self, x):
        self.in_shape = x.shape
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        return x.mean(axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        kept = list(self.in_shape)
        for a in self.axes:
            kept[a] = 1
        g = mul(reshape(g, tuple(kept)), 1.0 / self.count)
        return (broadcast_to(g, self.in_shape),)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    return Sum.apply(x, axes=_norm_axes(axis, x.ndim), keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    return Mean.apply(x, axes=_norm_axes(axis, x.ndim), keepdims=keepdims)


class Reshape(Function):
    tag = "reshape"

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, g):
        return (reshape(g, self.in_shape),)


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(n) for n in shape)
    if shape.count(-1) == 1:
        known = int(np.prod([n for n in shape if n != -1]))
        if known == 0 or x.size % known:
            raise ShapeError("reshape", x.shape, shape)
        shape = tuple(x.size // known if n == -1 else n for n in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    return Reshape.apply(x, shape=shape)


class Transpose(Function):
    tag = "transpose"

    def forward(self, x):
        return np.ascontiguousarray(np.transpose(x, self.axes))

    def backward(self, g):
        return (transpose(g, tuple(np.argsort(self.axes))),)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return Transpose.apply(x, axes=tuple(axes))


def swap_last(x):
    nd = as_tensor(x).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class GetItem(Function):
    tag = "getitem"

    def forward(self, x):
        self.in_shape = x.shape
        return np.array(x[self.index])

    def backward(self, g):
        return (Scatter.apply(g, shape=self.in_shape, index=self.index),)


class Scatter(Function):
    """Place ``g`` at ``index`` inside zeros of ``shape`` (adjoint of getitem)."""

    tag = "scatter"

    def forward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        if _is_basic(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return out

    def backward(self, gg):
        return (GetItem.apply(gg, index=self.index),)


def getitem(x, index):
    return GetItem.apply(x, index=index)


class Concat(Function):
    tag = "concat"

    def forward(self, *xs):
        self.sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g):
        outs, start = [], 0
        nd = g.ndim
        for n in self.sizes:
            index = [slice(None)] * nd
            index[self.axis] = slice(start, start + n)
            outs.append(getitem(g, tuple(index)))
            start += n
        return tuple(outs)


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    nd = xs[0].ndim
    axis = axis % nd
    for x in xs[1:]:
        other = [s for i, s in enumerate(x.shape) if i != axis]
        first = [s for i, s in enumerate(xs[0].shape) if i != axis]
        if x.ndim != nd or other != first:
            raise ShapeError("concat", xs[0].shape, x.shape)
    return Concat.apply(*xs, axis=axis)


class Cumsum(Function):
    tag = "cumsum"

    def forward(self, x):
        return np.cumsum(x, axis=self.axis)

    def backward(self, g):
        return (RevCumsum.apply(g, axis=self.axis),)


class RevCumsum(Function):
    tag = "rev_cumsum"

    def forward(self, x):
        return np.flip(np.cumsum(np.flip(x, self.axis), axis=self.axis), self.axis).copy()

    def backward(self, g):
        return (Cumsum.apply(g, axis=self.axis),)


def cumsum(x, axis=-1):
    x = as_tensor(x)
    return Cumsum.apply(x, axis=axis % x.ndim)


# --------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    tag = "matmul"

    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if self.needs[0] else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if self.needs[1] else None
        return ga, gb


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    return MatMul.apply(a, b)


# --------------------------------------------------------------------------
# convolution (NCHW, odd square kernel, stride 1, "same" padding)


def _im2col(x, k):
    """(C*k*k, N*H*W) patch matrix, zero padded; row order matches w.reshape(O, -1)."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


class Conv2d(Function):
    tag = "conv2d"

    def forward(self, x, w):
        n, _, h, wd = x.shape
        out = w.reshape(w.shape[0], -1) @ _im2col(x, w.shape[-1])
        return np.ascontiguousarray(out.reshape(w.shape[0], n, h, wd).transpose(1, 0, 2, 3))

    def backward(self, g):
        x, w = self.inputs
        gx = conv2d(g, flip_kernel(w)) if self.needs[0] else None
        gw = ConvWeightGrad.apply(x, g, k=w.shape[-1]) if self.needs[1] else None
        return gx, gw


class ConvWeightGrad(Function):
    """d<g, conv2d(x, w)>/dw as a function of (x, g)."""

    tag = "conv2d_weight_grad"

    def forward(self, x, g):
        c, k = x.shape[1], self.k
        g2 = g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)
        return (g2 @ _im2col(x, k).T).reshape(g.shape[1], c, k, k)

    def backward(self, gw):
        x, g = self.inputs
        gx = conv2d(g, flip_kernel(gw)) if self.needs[0] else None
        gg = conv2d(x, gw) if self.needs[1] else None
        return gx, gg


class FlipKernel(Function):
    """Swap in/out channels and rotate 180 degrees; its own adjoint."""

    tag = "flip_kernel"

    def forward(self, w):
        return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])

    def backward(self, g):
        return (flip_kernel(g),)


def flip_kernel(w):
    return FlipKernel.apply(w)


def conv2d(x, w, b=None):
    """3x3 (or any odd k) convolution, stride 1, zero padding k//2."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    out = Conv2d.apply(x, w)
    if b is not None:
        out = add(out, reshape(b, (1, -1, 1, 1)))
    return out


# --------------------------------------------------------------------------
# resampling by factor 2


class AvgPool2(Function):
    tag = "avg_pool"

    def forward(self, x):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, g):
        return (mul(upsample_nearest(g), 0.25),)


class UpsampleNearest2(Function):
    tag = "upsample_nearest"

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, g):
        return (mul(avg_pool(g), 4.0),)


@lru_cache(maxsize=None)
def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo, hi = min(max(i0, 0), n - 1), min(max(i0 + 1, 0), n - 1)
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


class UpsampleBilinear2(Function):
    tag = "upsample_bilinear"

    def forward(self, x):
        uh = _bilinear_matrix(x.shape[2]).astype(x.dtype)
        uw = _bilinear_matrix(x.shape[3]).astype(x.dtype)
        return uh @ x @ uw.T

    def backward(self, g):
        n = self.inputs[0].shape
        return (BilinearAdjoint.apply(g, hw=(n[2], n[3])),)


class BilinearAdjoint(Function):
    tag = "upsample_bilinear_adjoint"

    def forward(self, g):
        uh = _bilinear_matrix(self.hw[0]).astype(g.dtype)
        uw = _bilinear_matrix(self.hw[1]).astype(g.dtype)
        return uh.T @ g @ uw

    def backward(self, gg):
        return (UpsampleBilinear2.apply(gg),)


def _check_4d(op, x, even=False):
    if x.ndim != 4 or (even and (x.shape[2] % 2 or x.shape[3] % 2)):
        raise ShapeError(op, x.shape)


def avg_pool(x):
    x = as_tensor(x)
    _check_4d("avg_pool", x, even=True)
    return AvgPool2.apply(x)


def upsample_nearest(x):
    x = as_tensor(x)
    _check_4d("upsample_nearest", x)
    return UpsampleNearest2.apply(x)


def upsample_bilinear(x):
    x = as_tensor(x)
    _check_4d("upsample_bilinear", x)
    return UpsampleBilinear2.apply(x)


# --------------------------------------------------------------------------
# small composites


def l1(a, b):
    """Mean absolute difference."""
    return mean(abs(sub(a, b)))


def mse(a, b):
    return mean(square(sub(a, b)))


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


# --------------------------------------------------------------------------
# ragged helpers: rows grouped into contiguous segments


class SegmentRepeat(Function):
    """Repeat row i of (B, ...) ``counts[i]`` times."""

    tag = "segment_repeat"

    def forward(self, x):
        return np.repeat(x, self.counts, axis=0)

    def backward(self, g):
        return (SegmentSum.apply(g, counts=self.counts),)


class SegmentSum(Function):
    tag = "segment_sum"

    def forward(self, g):
        out = np.zeros((len(self.counts),) + g.shape[1:], dtype=g.dtype)
        nonempty = np.flatnonzero(self.counts)
        if len(nonempty):
            starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])[nonempty]
            out[nonempty] = np.add.reduceat(g, starts, axis=0)
        return out

    def backward(self, gg):
        return (SegmentRepeat.apply(gg, counts=self.counts),)


def segment_repeat(x, counts):
    return SegmentRepeat.apply(x, counts=np.asarray(counts))


class GatherRows(Function):
    """x[index] for a tuple of unique integer index arrays."""

    tag = "gather"

    def forward(self, x):
        self.in_shape = x.shape
        return x[self.index]

    def backward(self, g):
        return (ScatterRows.apply(g, shape=self.in_shape, index=self.index),)


class ScatterRows(Function):
    tag = "scatter_rows"

    def forward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[self.index] = g
        return out

    def backward(self, gg):
        return (GatherRows.apply(gg, index=self.index),)


def gather_rows(x, index):
    return GatherRows.apply(x, index=index)


def scatter_rows(values, shape, index):
    """Zeros of ``shape`` with ``values`` placed at unique ``index``."""
    return ScatterRows.apply(values, shape=tuple(shape), index=index)


class SymmetricSum(Function):
    """Elementwise sum of equally shaped inputs, independent of their order.

    Values are sorted across inputs before accumulating, so any permutation
    of the arguments gives bit-identical output.  Two inputs need no sort:
    a single IEEE addition is already commutative.
    """

    tag = "symmetric_sum"

    def forward(self, *xs):
        if len(xs) <= 2:
            return xs[0] + xs[1] if len(xs) == 2 else xs[0].copy()
        stacked = np.sort(np.stack(xs), axis=0)
        out = stacked[0].copy()
        for row in stacked[1:]:
            out += row
        return out

    def backward(self, g):
        return tuple(g for _ in self.inputs)


def symmetric_sum(xs):
    xs = [as_tensor(x) for x in xs]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError("symmetric_sum", xs[0].shape, x.shape)
    return SymmetricSum.apply(*xs)
