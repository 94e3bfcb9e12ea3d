"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tape records primitive applications in creation order; backward() replays
them once, in reverse, accumulating gradients into every watched Tensor.
Constants stay off the tape, so inference with no active tape runs at plain
numpy speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ACTIVE_TAPE = None
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf validation (slow; for debugging only)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A float64 array node. `watched` marks it as a gradient target."""

    __slots__ = ("data", "grad", "watched", "name", "node_id", "_parents", "_backward")

    def __init__(self, data, watched=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.watched = bool(watched)
        self.name = name
        self.node_id = None
        self._parents = ()
        self._backward = None
        if _DEBUG_CHECKS and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anon>'}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, watched={self.watched})"


class Tape:
    """Ordered record of primitive applications plus a parameter registry.

    Creation order is a topological order (inputs always precede their
    consumers), so one reversed sweep visits each node exactly once.
    """

    def __init__(self, params=None):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = dict(params) if params else {}
        for p in self.params.values():
            p.watched = True

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, t: Tensor) -> None:
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) into .grad of every watched tensor."""
        if loss.node_id is None or self.nodes[loss.node_id] is not loss:
            raise ValueError("loss tensor was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.node_id + 1]):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, watched=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.watched:
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _make(data, parents, backward) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.watched for p in parents):
        out = Tensor(data, watched=True)
        out._parents = parents
        out._backward = backward
        tape._record(out)
        return out
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b):
    a, b = wrap(a), wrap(b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = wrap(a), wrap(b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = wrap(a), wrap(b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = wrap(a), wrap(b)
    inv = 1.0 / b.data

    def bw(g):
        _accum(a, g * inv)
        _accum(b, -g * a.data * inv * inv)

    return _make(a.data * inv, (a, b), bw)


def neg(a):
    a = wrap(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def scale(a, c: float):
    a = wrap(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c))


def square(a):
    a = wrap(a)
    return _make(a.data * a.data, (a,), lambda g: _accum(a, 2.0 * g * a.data))


def exp(a):
    a = wrap(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * y))


def log(a):
    a = wrap(a)
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sqrt(a):
    a = wrap(a)
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * 0.5 / y))


def tanh(a):
    a = wrap(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def sigmoid(a):
    a = wrap(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), bw)


def silu(a):
    a = wrap(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accum(a, g * (s + x * s * (1.0 - s)))

    return _make(x * s, (a,), bw)


def sin(a):
    a = wrap(a)
    return _make(np.sin(a.data), (a,), lambda g: _accum(a, g * np.cos(a.data)))


def cos(a):
    a = wrap(a)
    return _make(np.cos(a.data), (a,), lambda g: _accum(a, -g * np.sin(a.data)))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(a, axis=None, keepdims=False):  # noqa: A001 - module-scoped name
    a = wrap(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(y, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = wrap(a)
    return _make(a.data.reshape(shape), (a,),
                 lambda g: _accum(a, g.reshape(a.data.shape)))


def transpose(a, axes):
    a = wrap(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,),
                 lambda g: _accum(a, g.transpose(inv)))


def concat(parts, axis=-1):
    parts = [wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), bw)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = wrap(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accum(a, buf)

    return _make(a.data[idx], (a,), bw)


def gather(a, indices, axis=0):
    """Select rows along `axis` by integer index (duplicates allowed)."""
    a = wrap(a)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        buf = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(buf, indices, g)
        else:
            mv = np.moveaxis(buf, axis, 0)
            np.add.at(mv, indices, np.moveaxis(g, axis, 0))
        _accum(a, buf)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def matmul(a, b):
    a, b = wrap(a), wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects tensors with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(y, (a, b), bw)


def custom_op(data, parents, backward) -> Tensor:
    """Record a fused primitive with a hand-written backward closure.

    `backward(g)` must call autodiff gradient accumulation on each watched
    parent itself (via `accumulate`).
    """
    return _make(data, tuple(parents), backward)


accumulate = _accum  # for custom_op backward closures


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def grad_check(fn, inputs, tolerance=1e-4, h=1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar-valued fn(*inputs) to central differences.

    fn must be pure: every call re-runs the forward from the same input
    tensors. Inputs are watched for the duration of the check.
    """
    inputs = [wrap(x) for x in inputs]
    saved = [(x.watched, x.grad) for x in inputs]
    for x in inputs:
        x.watched = True
        x.grad = None
    try:
        with Tape() as tape:
            out = fn(*inputs)
            if out.data.size != 1:
                raise ShapeError("grad_check requires a scalar-valued function")
            tape.backward(out)
        analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
                    for x in inputs]

        max_err = 0.0
        per_input = []
        for x, g_ad in zip(inputs, analytic):
            g_fd = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            fd_flat = g_fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(fn(*inputs).data)
                flat[i] = orig - h
                f_minus = float(fn(*inputs).data)
                flat[i] = orig
                d = (f_plus - f_minus) / (2.0 * h)
                if not math.isfinite(d):
                    raise NonFiniteError("non-finite central difference")
                fd_flat[i] = d
            denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-6)
            err = float(np.max(np.abs(g_ad - g_fd) / denom)) if flat.size else 0.0
            per_input.append(err)
            max_err = max(max_err, err)
        return GradCheckReport(max_rel_err=max_err, tolerance=tolerance,
                               per_input=per_input)
    finally:
        for x, (w, g) in zip(inputs, saved):
            x.watched = w
            x.grad = g
