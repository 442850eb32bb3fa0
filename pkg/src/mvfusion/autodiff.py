"""Minimal reverse-mode differentiation over numpy arrays.

The op set is closed and enumerable: the network architectures compile to
``matmul, add, mul, scale, sigmoid, tanh, relu, softmax, concat, slice,
reshape, reduce-mean, reduce-max, reduce-prod``.  Two further ops carry
hand-derived gradients because they are not expressible in that set:
``bce`` (clamped binary cross-entropy on probabilities) and ``batchnorm``
(train-mode batch normalization).  Every rule is validated against the
central finite-difference oracle in :func:`grad_check`.

Graphs are built eagerly: each call returns a new :class:`Value` holding
the result, the parent nodes, and a VJP closure.  Inputs are never
mutated.  :func:`backward` accumulates into ``.grad`` without zeroing, so
repeated calls sum their contributions; callers zero grads between steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AxisError, GraphError, NumericError, ShapeError

__all__ = [
    "Value",
    "forward",
    "backward",
    "grad_check",
    "GradCheckReport",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "concat",
    "narrow",
    "reshape",
    "reduce_mean",
    "reduce_max",
    "reduce_prod",
    "bce",
    "batch_norm_train",
]

_MAX_RANK = 3
_BCE_EPS = 1e-7


class Value:
    """One node of the computation graph: data plus gradient plumbing."""

    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "_vjp")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.ndim > _MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum {_MAX_RANK}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.op = "leaf"
        self.parents: tuple[Value, ...] = ()
        self.requires_grad = bool(requires_grad)
        self._vjp: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar used by the layer code; delegates to the primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data, parents, op, vjp) -> Value:
    out = Value.__new__(Value)
    arr = np.asarray(data)
    if arr.ndim > _MAX_RANK:
        raise ShapeError(f"op {op!r} produced rank {arr.ndim} > {_MAX_RANK}")
    out.data = arr
    out.grad = np.zeros_like(arr)
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in out.parents)
    out._vjp = vjp if out.requires_grad else None
    return out


def _check_axis(axis, ndim, op):
    if not isinstance(axis, (int, np.integer)):
        raise AxisError(f"{op}: axis must be an integer, got {axis!r}")
    if not -ndim <= axis < ndim:
        raise AxisError(f"{op}: axis {axis} out of range for rank {ndim}")
    return int(axis) % ndim


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), "matmul", vjp)


def add(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), "add", vjp)


def sub(a, b) -> Value:
    """a - b, composed from add and scale."""
    return add(a, scale(_wrap(b), -1.0))


def mul(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), "mul", vjp)


def scale(a, factor) -> Value:
    a = _wrap(a)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _node(a.data * factor, (a,), "scale", vjp)


def sigmoid(a) -> Value:
    a = _wrap(a)
    # Split by sign so exp never overflows.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), "sigmoid", vjp)


def tanh(a) -> Value:
    a = _wrap(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), "tanh", vjp)


def relu(a) -> Value:
    a = _wrap(a)
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _node(out, (a,), "relu", vjp)


def softmax(a, axis) -> Value:
    a = _wrap(a)
    axis = _check_axis(axis, a.data.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), "softmax", vjp)


def concat(values: Sequence[Value], axis) -> Value:
    vals = [_wrap(v) for v in values]
    if not vals:
        raise ShapeError("concat needs at least one input")
    axis = _check_axis(axis, vals[0].data.ndim, "concat")
    for v in vals[1:]:
        if v.data.ndim != vals[0].data.ndim:
            raise ShapeError("concat: operand ranks differ")
        va, vb = list(v.shape), list(vals[0].shape)
        va.pop(axis), vb.pop(axis)
        if va != vb:
            raise ShapeError(f"concat: shapes {vals[0].shape} and {v.shape} disagree off axis {axis}")
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(vals)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _node(np.concatenate([v.data for v in vals], axis=axis), vals, "concat", vjp)


def narrow(a, axis, start, length) -> Value:
    """Contiguous slice of `length` entries from `start` along `axis`."""
    a = _wrap(a)
    axis = _check_axis(axis, a.data.ndim, "slice")
    if not (0 <= start and start + length <= a.shape[axis] and length >= 1):
        raise ShapeError(f"slice [{start}:{start + length}] out of bounds for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(a.data[idx].copy(), (a,), "slice", vjp)


def reshape(a, shape) -> Value:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), (a,), "reshape", vjp)


def reduce_mean(a, axis) -> Value:
    a = _wrap(a)
    axis = _check_axis(axis, a.data.ndim, "reduce-mean")
    n = a.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _node(a.data.mean(axis=axis), (a,), "reduce-mean", vjp)


def reduce_max(a, axis) -> Value:
    a = _wrap(a)
    axis = _check_axis(axis, a.data.ndim, "reduce-max")
    # Ties route the whole gradient to the first maximizer (argmax order).
    idx = np.argmax(a.data, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(a.data.max(axis=axis), (a,), "reduce-max", vjp)


def reduce_prod(a, axis) -> Value:
    a = _wrap(a)
    axis = _check_axis(axis, a.data.ndim, "reduce-prod")
    x = a.data
    out = x.prod(axis=axis)

    def vjp(g):
        zero = x == 0
        nzeros = np.expand_dims(zero.sum(axis=axis), axis)
        safe = np.where(zero, 1.0, x)
        # Product of the non-zero entries = leave-one-out product at a lone zero.
        prod_nz = np.expand_dims(np.prod(safe, axis=axis), axis)
        ge = np.expand_dims(g, axis)
        grad = np.where(
            nzeros == 0,
            ge * prod_nz / safe,
            np.where((nzeros == 1) & zero, ge * prod_nz, 0.0),
        )
        return (grad.astype(x.dtype, copy=False),)

    return _node(out, (a,), "reduce-prod", vjp)


# ---------------------------------------------------------------------------
# ops with hand-derived gradients (not expressible in the closed set)
# ---------------------------------------------------------------------------

def bce(probabilities, labels) -> Value:
    """Mean binary cross-entropy of probabilities clamped to [eps, 1-eps].

    The scalar is computed and returned in double precision (so logged
    loss components recombine exactly); the gradient is cast back to the
    probabilities' dtype.
    """
    p = _wrap(probabilities)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"bce: probabilities {p.shape} vs labels {y.shape}")
    pc = np.clip(p.data.astype(np.float64), _BCE_EPS, 1.0 - _BCE_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()
    n = max(p.data.size, 1)
    inside = (p.data > _BCE_EPS) & (p.data < 1.0 - _BCE_EPS)

    def vjp(g):
        # d/dp of the clamped loss; zero outside the clamp window.
        return ((g * inside * (pc - y) / (pc * (1.0 - pc)) / n).astype(p.data.dtype),)

    return _node(np.asarray(loss), (p,), "bce", vjp)


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Train-mode batch normalization over axis 0 of a [B, D] tensor.

    Returns ``(out, batch_mean, batch_var)``; the plain-array statistics
    feed the caller's running-average update.  Uses population variance.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm expects [B, D] input, got {x.shape}")
    b = x.shape[0]
    if b < 2:
        raise ShapeError("batchnorm in train mode needs a batch of at least 2")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dx = (gamma.data * inv_std / b) * (b * g - dbeta - xhat * dgamma)
        return dx.astype(x.data.dtype, copy=False), dgamma, dbeta

    node = _node(out.astype(x.data.dtype, copy=False), (x, gamma, beta), "batchnorm", vjp)
    return node, mu, var


_DISPATCH = {
    "matmul": lambda inputs, **kw: matmul(*inputs),
    "add": lambda inputs, **kw: add(*inputs),
    "mul": lambda inputs, **kw: mul(*inputs),
    "scale": lambda inputs, **kw: scale(inputs[0], kw["factor"]),
    "sigmoid": lambda inputs, **kw: sigmoid(inputs[0]),
    "tanh": lambda inputs, **kw: tanh(inputs[0]),
    "relu": lambda inputs, **kw: relu(inputs[0]),
    "softmax": lambda inputs, **kw: softmax(inputs[0], kw["axis"]),
    "concat": lambda inputs, **kw: concat(inputs, kw["axis"]),
    "slice": lambda inputs, **kw: narrow(inputs[0], kw["axis"], kw["start"], kw["length"]),
    "reshape": lambda inputs, **kw: reshape(inputs[0], kw["shape"]),
    "reduce-mean": lambda inputs, **kw: reduce_mean(inputs[0], kw["axis"]),
    "reduce-max": lambda inputs, **kw: reduce_max(inputs[0], kw["axis"]),
    "reduce-prod": lambda inputs, **kw: reduce_prod(inputs[0], kw["axis"]),
    "bce": lambda inputs, **kw: bce(inputs[0], kw["labels"]),
}


def forward(op, inputs, axis=None, **kwargs):
    """Apply the primitive named `op` to `inputs` (a Value or sequence)."""
    if op not in _DISPATCH:
        raise GraphError(f"unknown primitive {op!r}")
    if isinstance(inputs, Value):
        inputs = (inputs,)
    if axis is not None:
        kwargs["axis"] = axis
    return _DISPATCH[op](tuple(inputs), **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Value) -> list[Value]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into `.grad` of reachable grad nodes."""
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    flows: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flows.get(id(parent))
            flows[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool


def grad_check(f, point, step=1e-3, tolerance=1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar-valued `f` against central
    finite differences at `point`.  Runs in double precision."""
    point = np.asarray(point, dtype=np.float64)
    x = Value(point.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise GraphError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        f_plus = f(Value(plus.reshape(point.shape))).data
        f_minus = f(Value(minus.reshape(point.shape))).data
        numeric.reshape(-1)[i] = (float(f_plus) - float(f_minus)) / (2.0 * step)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("non-finite values in gradient check")
    rel = np.abs(analytic - numeric) / np.maximum.reduce(
        [np.abs(analytic), np.abs(numeric), np.full_like(analytic, 1e-8)]
    )
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel_error=max_rel, passed=max_rel < tolerance)
