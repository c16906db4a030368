"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a numpy array. Every differentiable operation appends an
entry to the active tape; ``backward`` replays the tape in reverse append
order, which fixes the gradient accumulation order and keeps runs
bit-reproducible. A tape is built per training step and can be consumed
exactly once; a second ``backward`` on the same graph is rejected.

Broadcasting is deliberately restricted to identical shapes or
tensor-vs-scalar: the supernet never needs more, and narrow semantics keep
the gradient rules honest.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GraphError",
    "Tensor",
    "from_op",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "leaky_relu",
    "square",
    "absolute",
    "tsum",
    "tmean",
    "slice_leading",
    "scale_by_element",
    "ste_select",
    "backward",
]


class GraphError(RuntimeError):
    """Illegal graph usage: double backward, non-scalar loss, and friends."""


class _Tape:
    __slots__ = ("entries", "consumed")

    def __init__(self):
        self.entries = []  # list of (out_tensor, backward_fn)
        self.consumed = False


_active_tape = None


def _tape():
    global _active_tape
    if _active_tape is None or _active_tape.consumed:
        _active_tape = _Tape()
    return _active_tape


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense real array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "node_id", "_cache")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.node_id = -1
        self._cache = None

    def op_cache(self):
        """Per-tensor scratch for ops that can share gathered layouts."""
        if self._cache is None:
            self._cache = {}
        return self._cache

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars only on the right where ambiguous
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scale_shift(self, 1.0, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scale_shift(self, 1.0, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)


def from_op(data, parents, backward_fn):
    """Create a Tensor as the output of an operation.

    ``backward_fn(grad_out)`` must accumulate into each requiring parent via
    ``parent.accumulate_grad``. Registration on the tape happens only when a
    parent requires grad, so constant subgraphs cost nothing.
    """
    out = Tensor(data)
    if any(p.requires_grad or p.tape is not None for p in parents):
        out.requires_grad = True
        t = _tape()
        out.tape = t
        out.node_id = len(t.entries)
        t.entries.append((out, backward_fn))
    return out


def backward(loss):
    """Populate gradients of every requiring leaf reachable from ``loss``.

    Deterministic: the tape is replayed in reverse append order. The tape is
    consumed afterwards; calling backward on it again raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        # constant loss: nothing depends on anything, all gradients stay zero
        return
    if tape.consumed:
        raise GraphError("backward called twice on the same graph; rebuild the graph per step")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, fn in reversed(tape.entries[: loss.node_id + 1]):
        if out.grad is None:
            continue
        fn(out.grad)
    tape.consumed = True


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad or a.tape is not None:
            a.accumulate_grad(g)
        if b.requires_grad or b.tape is not None:
            b.accumulate_grad(g)

    return from_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    _check_same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad or a.tape is not None:
            a.accumulate_grad(g)
        if b.requires_grad or b.tape is not None:
            b.accumulate_grad(-g)

    return from_op(a.data - b.data, (a, b), bw)


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad or a.tape is not None:
            a.accumulate_grad(g * b.data)
        if b.requires_grad or b.tape is not None:
            b.accumulate_grad(g * a.data)

    return from_op(a.data * b.data, (a, b), bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        a.accumulate_grad(g * s)

    return from_op(a.data * s, (a,), bw)


def scale_shift(a, s, c):
    s = float(s)

    def bw(g):
        a.accumulate_grad(g * s)

    return from_op(a.data * s + c, (a,), bw)


def neg(a):
    def bw(g):
        a.accumulate_grad(-g)

    return from_op(-a.data, (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        a.accumulate_grad(g * mask)

    return from_op(np.where(mask, a.data, 0.0), (a,), bw)


def leaky_relu(a, slope=0.2):
    # subgradient at exactly 0 is the negative-side slope, so tests are
    # deterministic
    slope = float(slope)
    mask = a.data > 0

    def bw(g):
        a.accumulate_grad(g * np.where(mask, 1.0, slope))

    return from_op(np.where(mask, a.data, slope * a.data), (a,), bw)


def square(a):
    def bw(g):
        a.accumulate_grad(g * (2.0 * a.data))

    return from_op(a.data * a.data, (a,), bw)


def absolute(a):
    # subgradient at 0 taken as 0
    sign = np.sign(a.data)

    def bw(g):
        a.accumulate_grad(g * sign)

    return from_op(np.abs(a.data), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a):
    def bw(g):
        a.accumulate_grad(np.full_like(a.data, float(g)))

    return from_op(np.asarray(a.data.sum()), (a,), bw)


def tmean(a):
    n = a.data.size

    def bw(g):
        a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return from_op(np.asarray(a.data.mean()), (a,), bw)


# ---------------------------------------------------------------------------
# structural ops


def slice_leading(a, count, axis=0):
    """First ``count`` entries along ``axis``; gradient scatters back."""
    n = a.data.shape[axis]
    if not 0 < count <= n:
        raise ValueError(f"slice_leading: count {count} outside 1..{n} on axis {axis}")
    if count == n:
        idx = None
    else:
        idx = tuple(slice(0, count) if d == axis else slice(None) for d in range(a.data.ndim))
    data = a.data if idx is None else a.data[idx]

    def bw(g):
        if idx is None:
            a.accumulate_grad(g)
        else:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)

    return from_op(data, (a,), bw)


def scale_by_element(x, weights, index):
    """``x * weights[index]`` with gradients to both operands.

    The workhorse of mixture sums: ``weights`` is a 1-d tensor of combination
    weights and ``x`` a feature map. Multiplying by an exact 1.0 is bitwise
    lossless, which the discretization consistency checks rely on.
    """
    w = float(weights.data[index])

    def bw(g):
        if x.requires_grad or x.tape is not None:
            x.accumulate_grad(g * w)
        if weights.requires_grad or weights.tape is not None:
            gw = np.zeros_like(weights.data)
            gw[index] = float((g * x.data).sum())
            weights.accumulate_grad(gw)

    return from_op(x.data * w, (x, weights), bw)


def ste_select(soft, index):
    """Straight-through selector: forward value exactly 1.0.

    Backward routes the incoming gradient to ``soft[index]`` as if the
    forward had been ``soft[index]`` itself, letting a hard categorical
    choice pass gradient to its sampling distribution.
    """

    def bw(g):
        gs = np.zeros_like(soft.data)
        gs[index] = float(g)
        soft.accumulate_grad(gs)

    return from_op(np.asarray(1.0, dtype=soft.data.dtype), (soft,), bw)
