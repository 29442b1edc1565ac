"""Minimal reverse-mode autodiff over numpy arrays.

Every model computation runs through :class:`Tensor`. Operations executed
while a :class:`Tape` is active append a node (op name, inputs, output,
backward closure) to the tape; ``backward(loss)`` replays the recorded
nodes in reverse, visiting each exactly once. Without an active tape the
same functions are plain forward numpy math, which is how inference runs.

Precision is process-global: float32 for training speed, float64 for
gradient checks and reproducibility runs (see ``set_precision`` and the
``DEFORMAD_PRECISION`` environment variable).
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

_PRECISION_ENV = "DEFORMAD_PRECISION"
_DTYPES = {"32": np.float32, "64": np.float64}
_dtype = _DTYPES.get(os.environ.get(_PRECISION_ENV, "32"), np.float32)


def default_dtype():
    """Active floating-point dtype (numpy type object)."""
    return _dtype


def set_precision(bits) -> None:
    """Select 32- or 64-bit compute mode for tensors created afterwards."""
    global _dtype
    key = str(bits)
    if key not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")
    _dtype = _DTYPES[key]


@contextmanager
def precision(bits):
    """Temporarily switch compute precision (used heavily by tests)."""
    global _dtype
    saved = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        _dtype = saved


class Node:
    """One recorded operation: inputs, output, and its vector-Jacobian rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only log of operations, in execution (= topological) order."""

    _active = None

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        output.tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, backward_fn))


def _recording(inputs):
    tape = Tape._active
    if tape is None:
        return None
    if any(t.requires_grad for t in inputs):
        return tape
    return None


class Tensor:
    """N-dimensional float array with an optional gradient accumulator.

    ``data`` is treated as immutable once wrapped (optimizers mutate
    parameter data between steps, never mid-graph). ``grad`` is absent
    until ``backward`` reaches the tensor, then matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.tape_id = None
        self.name = name

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

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    # -- pointwise / reductions --------------------------------------------

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def clip_unit(self):
        return clip_unit(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_dtype))


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _make(data, inputs, op, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    tape = _recording(inputs)
    if tape is not None:
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _sum_to_shape(grad, shape):
    # undo numpy broadcasting: collapse added/expanded axes back to `shape`
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- binary ops (broadcasting) -----------------------------------------------

def add(a, b):
    def backward(dout):
        return _sum_to_shape(dout, a.shape), _sum_to_shape(dout, b.shape)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    def backward(dout):
        return _sum_to_shape(dout, a.shape), _sum_to_shape(-dout, b.shape)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    def backward(dout):
        return (_sum_to_shape(dout * b.data, a.shape),
                _sum_to_shape(dout * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b):
    def backward(dout):
        return (_sum_to_shape(dout / b.data, a.shape),
                _sum_to_shape(-dout * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), "div", backward)


def neg(a):
    def backward(dout):
        return (-dout,)

    return _make(-a.data, (a,), "neg", backward)


def pow_const(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    p = float(exponent)

    def backward(dout):
        return (dout * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), "pow", backward)


# -- pointwise ----------------------------------------------------------------

def abs_(a):
    def backward(dout):
        return (dout * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), "abs", backward)


def sqrt(a):
    root = np.sqrt(a.data)

    def backward(dout):
        # subgradient 0 at exactly zero keeps zero offset fields stable
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(a.data > 0.0, 0.5 / root, 0.0)
        return (dout * g,)

    return _make(root, (a,), "sqrt", backward)


def tanh(a):
    t = np.tanh(a.data)

    def backward(dout):
        return (dout * (1.0 - t * t),)

    return _make(t, (a,), "tanh", backward)


def relu(a):
    def backward(dout):
        return (dout * (a.data > 0.0),)

    return _make(np.maximum(a.data, 0.0), (a,), "relu", backward)


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(dout):
        return (dout * s * (1.0 - s),)

    return _make(s.astype(a.data.dtype, copy=False), (a,), "sigmoid", backward)


def clip_unit(a):
    """Clip to [-1, 1]; gradient is 1 inside the interval, 0 outside."""
    inside = (a.data >= -1.0) & (a.data <= 1.0)

    def backward(dout):
        return (dout * inside,)

    return _make(np.clip(a.data, -1.0, 1.0), (a,), "clip", backward)


_ELEMENTWISE = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "clip": clip_unit}


def elementwise(a, kind):
    """Dispatch by name; `kind` is one of tanh, relu, sigmoid, clip."""
    try:
        return _ELEMENTWISE[kind](a)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def stop_gradient(a):
    """Forward identity that contributes exactly zero upstream gradient."""
    out = Tensor(a.data, dtype=a.data.dtype)
    out.requires_grad = False
    return out


# -- reductions ----------------------------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(dout):
        g = dout
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)

    return _make(np.asarray(out_data), (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes) if axes else 1
    out_data = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def backward(dout):
        g = dout / count
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)

    return _make(np.asarray(out_data), (a,), "mean", backward)


# -- shape ops -------------------------------------------------------------------

def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward(dout):
        return (dout.reshape(a.shape),)

    return _make(out_data, (a,), "reshape", backward)


def transpose_axes(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(dout):
        return (np.ascontiguousarray(dout.transpose(inverse)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 "transpose", backward)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis (used to split offset channels)."""
    axis = axis % a.ndim
    idx = tuple(slice(start, start + length) if d == axis else slice(None)
                for d in range(a.ndim))
    out_data = a.data[idx]

    def backward(dout):
        g = np.zeros_like(a.data)
        g[idx] = dout
        return (g,)

    return _make(out_data.copy(), (a,), "narrow", backward)


def concat(tensors, axis):
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(dout):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(dout, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, "concat", backward)


# -- backward pass ----------------------------------------------------------------

def backward(loss):
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise RuntimeError("loss was not recorded on a tape (no active Tape "
                           "or no differentiable inputs)")

    needed = [False] * len(tape.nodes)
    needed[loss.tape_id] = True
    for i in range(loss.tape_id, -1, -1):
        if not needed[i]:
            continue
        for t in tape.nodes[i].inputs:
            if t.tape is tape and t.tape_id is not None:
                needed[t.tape_id] = True

    loss.grad = np.ones_like(loss.data)
    for i in range(loss.tape_id, -1, -1):
        if not needed[i]:
            continue
        node = tape.nodes[i]
        dout = node.output.grad
        if dout is None:
            continue
        grads = node.backward_fn(dout)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            else:
                t.grad += g
