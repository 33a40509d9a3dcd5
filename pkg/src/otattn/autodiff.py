"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs are linked to it.  Leaves
are created with :meth:`Tape.variable`; tensors built without a tape are plain
constants and never receive gradients.  :func:`backward` walks the tape in
reverse creation order (which is a valid topological order) and accumulates
cotangents additively.

Vector-Jacobian products are written with the same tensor operations used in
the forward pass, so ``backward(..., create_graph=True)`` records the backward
pass itself on the tape.  This is what lets the full (non straight-through)
MESH unroll be differentiated.

Broadcasting follows numpy rules; gradients are summed back to the operand
shape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DomainError(ArithmeticError):
    """Raised when ``log``/``div``/``sqrt`` receive an operand outside their domain."""

    def __init__(self, op: str, index: tuple, value: float):
        self.op = op
        self.index = index
        self.value = value
        super().__init__(f"{op}: operand {value!r} at index {index} is outside the domain")


class TapeError(RuntimeError):
    pass


@dataclass
class _Node:
    op: str
    inputs: tuple  # Tensors
    out_id: int
    vjp: Callable  # (g, ins, out) -> tuple of cotangents (Tensor or None)
    out_ref: "Tensor"


class Tape:
    """Single-threaded recorder of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def variable(self, data) -> "Tensor":
        """Create a tape-linked leaf holding a float64 copy of ``data``."""
        t = Tensor(np.array(data, dtype=np.float64))
        t.tape = self
        t.node_id = self._new_id()
        return t

    def __len__(self):
        return len(self.nodes)

    def release(self) -> None:
        """Drop the recorded graph.

        Nodes and their outputs reference each other, so without this a
        finished tape waits for the cycle collector before its arrays are freed.
        """
        self.nodes.clear()


class Tensor:
    """Dense float64 array with an optional link into a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.tape: Tape | None = None
        self.node_id: int | None = None

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
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        link = f", tape_id={self.node_id}" if self.tape is not None else ""
        return f"Tensor({self.data!r}{link})"

    def __len__(self):
        return len(self.data)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x) -> Tensor:
    """Same values, no tape link."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("operands are linked to different tapes")
    return tape


def _record(op: str, out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.tape = None
    result.node_id = None
    tape = _tape_of(inputs)
    if tape is not None:
        result.tape = tape
        result.node_id = tape._new_id()
        tape.nodes.append(_Node(op, inputs, result.node_id, vjp, result))
    return result


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def _sum_to_shape(arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    if lead > 0:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr.reshape(shape)


def sum_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _record("sum_to", _sum_to_shape(x.data, shape), (x,),
                   lambda g, ins, out: (broadcast_to(g, src),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    out = np.broadcast_to(x.data, shape)
    return _record("broadcast_to", out, (x,), lambda g, ins, out: (sum_to(g, src),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g, ins, out: (reshape(g, src),))


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _record("transpose", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g, ins, out: (transpose(g),))


def take(x, index) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _record("take", x.data[index], (x,), lambda g, ins, out: (scatter(g, index, src),))


def scatter(x, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``x`` added at ``index`` (adjoint of indexing)."""
    x = as_tensor(x)
    out = np.zeros(shape)
    np.add.at(out, index, x.data)
    return _record("scatter", out, (x,), lambda g, ins, out: (take(g, index),))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary(op, a, b, fwd, vjp):
    a = as_tensor(a)
    b = as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc
    return _record(op, out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add,
                   lambda g, ins, out: (sum_to(g, ins[0].shape), sum_to(g, ins[1].shape)))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract,
                   lambda g, ins, out: (sum_to(g, ins[0].shape), sum_to(neg(g), ins[1].shape)))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda g, ins, out: (sum_to(g * ins[1], ins[0].shape),
                                        sum_to(g * ins[0], ins[1].shape)))


def _first_bad(mask: np.ndarray, arr: np.ndarray):
    idx = tuple(int(i) for i in np.argwhere(mask)[0])
    return idx, float(arr[idx]) if arr.ndim else float(arr)


def div(a, b) -> Tensor:
    b_t = as_tensor(b)
    zero = b_t.data == 0
    if zero.any():
        idx, val = _first_bad(zero, b_t.data)
        raise DomainError("div", idx, val)
    return _binary("div", a, b_t, np.divide,
                   lambda g, ins, out: (sum_to(g / ins[1], ins[0].shape),
                                        sum_to(neg(g) * out / ins[1], ins[1].shape)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", -x.data, (x,), lambda g, ins, out: (neg(g),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _record("exp", np.exp(x.data), (x,), lambda g, ins, out: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    bad = x.data <= 0
    if bad.any():
        idx, val = _first_bad(bad, x.data)
        raise DomainError("log", idx, val)
    return _record("log", np.log(x.data), (x,), lambda g, ins, out: (g / ins[0],))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    bad = x.data < 0
    if bad.any():
        idx, val = _first_bad(bad, x.data)
        raise DomainError("sqrt", idx, val)
    return _record("sqrt", np.sqrt(x.data), (x,), lambda g, ins, out: (g * 0.5 / out,))


def maximum(x, scalar: float) -> Tensor:
    """Elementwise ``max(x, scalar)``; the gradient goes to ``x`` where ``x > scalar``."""
    x = as_tensor(x)
    mask = (x.data > scalar).astype(np.float64)
    return _record("max_with_scalar", np.maximum(x.data, scalar), (x,),
                   lambda g, ins, out: (g * mask,))


def relu(x) -> Tensor:
    return maximum(x, 0.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", out, (x,), lambda g, ins, out: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _record("tanh", np.tanh(x.data), (x,), lambda g, ins, out: (g * (1.0 - out * out),))


def xlogx(x) -> Tensor:
    """``x * log(x)`` with ``0 log 0 = 0``; the derivative at 0 is taken as 0."""
    x = as_tensor(x)
    if (x.data < 0).any():
        idx, val = _first_bad(x.data < 0, x.data)
        raise DomainError("xlogx", idx, val)
    pos = x.data > 0
    safe = np.where(pos, x.data, 1.0)
    out = np.where(pos, x.data * np.log(safe), 0.0)
    maskf = pos.astype(np.float64)

    def vjp(g, ins, out):
        if g.tape is None and ins[0].tape is None:
            return (Tensor(g.data * np.where(pos, np.log(safe) + 1.0, 0.0)),)
        inner = ins[0] * maskf + (1.0 - maskf)
        return (g * (log(inner) + 1.0) * maskf,)

    return _record("xlogx", out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    for a in axes:
        if x.shape[a] == 0:
            raise ValueError(f"sum over empty axis {a}")
    src = x.shape
    kshape = _keep_shape(src, axes)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _record("sum", np.asarray(out), (x,),
                   lambda g, ins, out: (broadcast_to(reshape(g, kshape), src),))


def logsumexp(x, axis=-1, keepdims=False) -> Tensor:
    """Max-shifted log-sum-exp; its gradient is the softmax of the inputs."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    for a in axes:
        if x.shape[a] == 0:
            raise ValueError(f"logsumexp over empty axis {a}")
    m = np.max(x.data, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(x.data - m), axis=axes, keepdims=True)) + m
    kshape = lse.shape
    out = lse if keepdims else lse.reshape([s for i, s in enumerate(lse.shape) if i not in axes])

    def vjp(g, ins, out):
        o = reshape(out, kshape)
        return (reshape(g, kshape) * exp(ins[0] - o),)

    return _record("logsumexp", out, (x,), vjp)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, ins, out):
        return (out * (g - reduce_sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), vjp)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _record("matmul", np.matmul(a.data, b.data), (a, b),
                   lambda g, ins, out: (sum_to(matmul(g, transpose(ins[1])), ins[0].shape),
                                        sum_to(matmul(transpose(ins[0]), g), ins[1].shape)))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return reduce_sum(x, axes, keepdims) / float(count)


def square(x) -> Tensor:
    x = as_tensor(x)
    return x * x


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class GradMap:
    """Gradients keyed by tensor; tensors off the path get zeros."""

    def __init__(self, grads: dict, create_graph: bool):
        self._grads = grads
        self._create_graph = create_graph

    def __getitem__(self, t: Tensor):
        g = self._grads.get(t.node_id) if t.tape is not None else None
        if g is None:
            z = np.zeros(t.shape)
            return Tensor(z) if self._create_graph else z
        return g if self._create_graph else g.data

    def __contains__(self, t: Tensor):
        return t.tape is not None and t.node_id in self._grads


def backward(output: Tensor, cotangent=None, *, create_graph: bool = False) -> GradMap:
    """Reverse sweep from ``output``.

    ``cotangent`` defaults to 1 and is required when ``output`` is not a
    scalar.  With ``create_graph`` the returned gradients are tape-linked
    tensors; otherwise they are plain arrays.
    """
    if output.tape is None:
        raise TapeError("backward on a tensor that is not on a tape")
    tape = output.tape
    if cotangent is None:
        if output.size != 1:
            raise ValueError("non-scalar output needs an explicit cotangent")
        seed = Tensor(np.ones(output.shape))
    else:
        seed = as_tensor(cotangent)
        if seed.shape != output.shape:
            raise ValueError(f"cotangent shape {seed.shape} != output shape {output.shape}")
        if not create_graph:
            seed = detach(seed)
    grads: dict[int, Tensor] = {output.node_id: seed}
    nodes = [n for n in tape.nodes if n.out_id <= output.node_id]
    for node in reversed(nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        if create_graph:
            ins, out = node.inputs, node.out_ref
        else:
            ins = tuple(detach(t) for t in node.inputs)
            out = detach(node.out_ref)
        parts = node.vjp(g, ins, out)
        for t, gt in zip(node.inputs, parts):
            if gt is None or t.tape is None:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gt if prev is None else prev + gt
    return GradMap(grads, create_graph)


def grad(output: Tensor, inputs: Sequence[Tensor], cotangent=None, *, create_graph=False) -> list:
    gm = backward(output, cotangent, create_graph=create_graph)
    return [gm[t] for t in inputs]
