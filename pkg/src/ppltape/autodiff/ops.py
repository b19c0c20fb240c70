"""Primitive differentiable operations.

Every function accepts Values, Parameters, feed slots or plain array-likes;
non-Values are lifted onto the tape of the first Value argument (or the active
tape). Broadcasting follows numpy: trailing axes align and extent-1 axes
stretch; the backward pass sums cotangents back over stretched axes.
"""

from __future__ import annotations

import math
import numbers
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from ppltape.autodiff.tape import Tape, TapeError, Value, active_tape, as_tensor, current_tape
from ppltape.errors import ShapeError

AxisLike = Union[None, int, Sequence[int]]


def _find_tape(args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Value):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("values from different tapes cannot be combined")
    if tape is None:
        return active_tape()
    active = current_tape()
    if active is not None and active is not tape and not tape.is_open:
        raise TapeError("value belongs to a closed tape; recompute it on the active tape")
    return tape


def lift(x, tape: Optional[Tape] = None) -> Value:
    """Return ``x`` as a Value on ``tape`` (default: the active tape)."""
    if isinstance(x, Value):
        if tape is not None and x.tape is not tape:
            raise TapeError("value belongs to a different tape")
        return x
    if tape is None:
        tape = active_tape()
    if hasattr(x, "_as_value"):
        return x._as_value(tape)
    return tape.constant(x)


def _lift_all(*xs) -> tuple:
    tape = _find_tape(xs)
    return tuple(lift(x, tape) for x in xs)


def tensor_of(x) -> np.ndarray:
    """Numeric content of anything liftable, without touching a tape."""
    if isinstance(x, Value):
        return x.data
    if hasattr(x, "_as_value"):
        tape = current_tape()
        if tape is not None:
            return x._as_value(tape).data
        return as_tensor(x.value)
    return as_tensor(x)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting stretched to reach its shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(map(str, shapes))}") from None


# --- binary elementwise -----------------------------------------------------

def add(a, b) -> Value:
    a, b = _lift_all(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape.record("add", (a, b), a.data + b.data,
                         lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = _lift_all(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape.record("sub", (a, b), a.data - b.data,
                         lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    a, b = _lift_all(a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    x, y = a.data, b.data
    return a.tape.record("mul", (a, b), x * y,
                         lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)))


def div(a, b) -> Value:
    a, b = _lift_all(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    x, y = a.data, b.data
    out = x / y

    def vjp(g):
        gy = g / y
        return unbroadcast(gy, x.shape), unbroadcast(-gy * out, y.shape)

    return a.tape.record("div", (a, b), out, vjp)


# --- unary elementwise ------------------------------------------------------

def neg(a) -> Value:
    (a,) = _lift_all(a)
    return a.tape.record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Value:
    (a,) = _lift_all(a)
    out = np.exp(a.data)
    return a.tape.record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Value:
    (a,) = _lift_all(a)
    x = a.data
    with np.errstate(divide="ignore"):
        out = np.log(x)
    return a.tape.record("log", (a,), out, lambda g: (g / x,))


def log1p(a) -> Value:
    (a,) = _lift_all(a)
    x = a.data
    with np.errstate(divide="ignore"):
        out = np.log1p(x)
    return a.tape.record("log1p", (a,), out, lambda g: (g / (1.0 + x),))


def pow(a, exponent: float) -> Value:
    if not isinstance(exponent, numbers.Real):
        raise TypeError("pow supports a constant real exponent only")
    (a,) = _lift_all(a)
    x = a.data
    c = float(exponent)
    out = x ** c
    return a.tape.record("pow", (a,), out, lambda g: (g * c * x ** (c - 1.0),))


def square(a) -> Value:
    return pow(a, 2.0)


def sqrt(a) -> Value:
    (a,) = _lift_all(a)
    out = np.sqrt(a.data)
    return a.tape.record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def tanh(a) -> Value:
    (a,) = _lift_all(a)
    out = np.tanh(a.data)
    return a.tape.record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Value:
    (a,) = _lift_all(a)
    out = special.expit(a.data)
    return a.tape.record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Value:
    (a,) = _lift_all(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return a.tape.record("softplus", (a,), out, lambda g: (g * special.expit(x),))


def maximum(a, c: float) -> Value:
    """Elementwise ``max(a, c)`` against a constant threshold."""
    (a,) = _lift_all(a)
    x = a.data
    out = np.maximum(x, c)
    return a.tape.record("maximum", (a,), out, lambda g: (g * (x > c),))


def relu(a) -> Value:
    return maximum(a, 0.0)


def lgamma(a) -> Value:
    (a,) = _lift_all(a)
    x = a.data
    return a.tape.record("lgamma", (a,), special.gammaln(x),
                         lambda g: (g * special.digamma(x),))


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Value:
    a, b = _lift_all(a, b)
    x, y = a.data, b.data
    if x.ndim == 0 or y.ndim == 0:
        raise ShapeError("matmul: scalar operands are not allowed")
    kx = x.shape[-1]
    ky = y.shape[0] if y.ndim == 1 else y.shape[-2]
    if kx != ky:
        raise ShapeError(f"matmul: inner dimensions differ, {x.shape} @ {y.shape}")
    if x.ndim == 1 and y.ndim > 2:
        raise ShapeError("matmul: a vector may only multiply a matrix")
    out = np.matmul(x, y)

    def vjp(g):
        if x.ndim == 1 and y.ndim == 1:
            return g * y, g * x
        if y.ndim == 1:
            gx = np.multiply.outer(g, y)
            gy = np.tensordot(x, g, axes=(tuple(range(x.ndim - 1)), tuple(range(g.ndim))))
            return gx, gy
        if x.ndim == 1:
            return y @ g, np.multiply.outer(x, g)
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return unbroadcast(gx, x.shape), unbroadcast(gy, y.shape)

    return a.tape.record("matmul", (a, b), out, vjp)


def dot(a, b) -> Value:
    return matmul(a, b)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Value:
    (a,) = _lift_all(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return a.tape.record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


# --- reductions -------------------------------------------------------------

def _norm_axes(axis: AxisLike, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d value")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand(g: np.ndarray, axes: tuple, keepdims: bool, shape: tuple) -> np.ndarray:
    if not keepdims and axes:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis: AxisLike = None, keepdims: bool = False) -> Value:
    (a,) = _lift_all(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return a.tape.record("sum", (a,), np.asarray(out),
                         lambda g: (_expand(g, axes, keepdims, shape),))


def mean(a, axis: AxisLike = None, keepdims: bool = False) -> Value:
    (a,) = _lift_all(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    count = float(math.prod(shape[i] for i in axes)) if axes else 1.0
    out = np.sum(a.data, axis=axes, keepdims=keepdims) / count
    return a.tape.record("mean", (a,), np.asarray(out),
                         lambda g: (_expand(g / count, axes, keepdims, shape),))


def logsumexp(a, axis: AxisLike = -1, keepdims: bool = False) -> Value:
    """Overflow-safe ``log(sum(exp(a)))`` along ``axis``."""
    (a,) = _lift_all(a)
    x = a.data
    axes = _norm_axes(axis, a.ndim)
    m = np.max(x, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = m + np.log(np.sum(np.exp(x - m), axis=axes, keepdims=True))
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (gk * np.exp(x - out_k),)

    return a.tape.record("logsumexp", (a,), np.asarray(out), vjp)


# --- structural -------------------------------------------------------------

def _index_array(idx) -> np.ndarray:
    raw = tensor_of(idx)
    rounded = np.rint(raw)
    if raw.size and np.max(np.abs(raw - rounded)) > 1e-9:
        raise ShapeError("index tensor must hold integers")
    return rounded.astype(np.int64)


def gather(a, idx) -> Value:
    """Select rows (leading-axis entries) of ``a`` by an integer index tensor."""
    a = lift(a, _find_tape((a, idx)))
    x = a.data
    if x.ndim == 0:
        raise ShapeError("gather: cannot index a scalar")
    ii = _index_array(idx)
    n = x.shape[0]
    if ii.size and (ii.min() < 0 or ii.max() >= n):
        raise IndexError(f"gather: index out of range for leading extent {n}")
    out = x[ii]

    def vjp(g):
        gx = np.zeros_like(x)
        np.add.at(gx, ii, g)
        return (gx, None)

    # the index is recorded as a (non-differentiable) input so that
    # dependency queries on the tape see it
    return a.tape.record("gather", (a, lift(idx, a.tape)), out, vjp)


def one_hot(idx, n_classes: int) -> Value:
    """Indicator rows ``[..., n_classes]`` for an integer tensor (no gradient to ``idx``)."""
    tape = _find_tape((idx,))
    v = lift(idx, tape)
    ii = _index_array(v.data)
    out = np.eye(n_classes)[ii]
    return v.tape.record("one_hot", (v,), out, lambda g: (None,))


def index(a, key) -> Value:
    """Basic or integer-array indexing with scatter-add backward."""
    (a,) = _lift_all(a)
    x = a.data
    out = np.array(x[key], dtype=np.float64)

    def vjp(g):
        gx = np.zeros_like(x)
        np.add.at(gx, key, g)
        return (gx,)

    return a.tape.record("index", (a,), out, vjp)


def reshape(a, shape) -> Value:
    (a,) = _lift_all(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
    return a.tape.record("reshape", (a,), out, lambda g: (g.reshape(src),))


def broadcast_to(a, shape) -> Value:
    (a,) = _lift_all(a)
    src = a.shape
    shape = tuple(shape)
    if _broadcast_shape("broadcast_to", src, shape) != shape:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}")
    out = np.broadcast_to(a.data, shape)
    return a.tape.record("broadcast_to", (a,), out, lambda g: (unbroadcast(g, src),))


def concat(values: Sequence, axis: int = 0) -> Value:
    vs = _lift_all(*values)
    datas = [v.data for v in vs]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return vs[0].tape.record("concat", vs, out,
                             lambda g: tuple(np.split(g, sizes, axis=axis)))


def stop_gradient(a) -> Value:
    """Copy of ``a`` as a constant: no gradient flows through it."""
    if isinstance(a, Value):
        return a.tape.constant(a.data)
    return lift(a)


# --- composites -------------------------------------------------------------

def log_softmax(a, axis: int = -1) -> Value:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Value:
    return exp(log_softmax(a, axis=axis))


def log_sigmoid(a) -> Value:
    return neg(softplus(neg(a)))


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "log1p", "pow", "sqrt", "tanh",
    "sigmoid", "softplus", "lgamma", "matmul", "transpose", "sum", "mean", "logsumexp",
    "gather", "index", "reshape", "broadcast_to", "concat", "maximum",
)
