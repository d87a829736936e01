"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Var` values;
:func:`backward` walks the tape in reverse and accumulates adjoints.  The
elementwise helpers (:func:`exp`, :func:`relu`, ...) also accept plain
arrays and then just compute the value, so model code can be written once
and run with or without a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class Node:
    op: str
    value: np.ndarray
    parents: tuple[int, ...] = ()
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    adjoints: dict[int, np.ndarray] = field(default_factory=dict)

    def _record(self, op, value, parents=(), vjp=None) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        for p in parents:
            if p >= len(self.nodes):
                raise ValueError("node inputs must reference earlier nodes")
        self.nodes.append(Node(op, value, tuple(parents), vjp))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> "Var":
        return self._record("leaf", np.array(value, dtype=np.float64))

    def const(self, value) -> "Var":
        return self._record("const", np.array(value, dtype=np.float64))

    def __len__(self):
        return len(self.nodes)


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "id")
    # make numpy operators defer to the reflected Var methods
    __array_ufunc__ = None

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("cannot mix values from different tapes")
    return tape


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- primitives -----------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) + _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape._record(
        "add", a.value + b.value, (a.id, b.id),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)),
    )


def neg(a):
    if not isinstance(a, Var):
        return -_val(a)
    return a.tape._record("neg", -a.value, (a.id,), lambda g: (-g,))


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) * _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    return tape._record(
        "mul", va * vb, (a.id, b.id),
        lambda g: (unbroadcast(g * vb, va.shape), unbroadcast(g * va, vb.shape)),
    )


def reciprocal(a):
    if not isinstance(a, Var):
        return 1.0 / _val(a)
    out = 1.0 / a.value
    return a.tape._record("reciprocal", out, (a.id,), lambda g: (-g * out * out,))


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) @ _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return tape._record("matmul", va @ vb, (a.id, b.id), lambda g: (g @ vb.T, va.T @ g))


def transpose(a):
    if not isinstance(a, Var):
        return _val(a).T
    return a.tape._record("transpose", a.value.T, (a.id,), lambda g: (g.T,))


def take(a, index):
    """Basic or advanced indexing; the adjoint scatters back."""
    if not isinstance(a, Var):
        return _val(a)[index]
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape._record("take", a.value[index], (a.id,), vjp)


def concat(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    if tape is None:
        return np.concatenate([_val(x) for x in xs], axis=axis)
    xs = [_lift(tape, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return tape._record(
        "concat", np.concatenate([x.value for x in xs], axis=axis),
        tuple(x.id for x in xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def _unary(name, fn, dfn):
    def op(a):
        if not isinstance(a, Var):
            return fn(_val(a))
        x = a.value
        out = fn(x)
        return a.tape._record(name, out, (a.id,), lambda g: (g * dfn(x, out),))

    op.__name__ = name
    return op


exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))
square = _unary("square", np.square, lambda x, y: 2.0 * x)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(a, Var):
        return np.sum(_val(a), axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a.id,), vjp)


def mean(a, axis=None, keepdims=False):
    n = _val(a).size if axis is None else _val(a).shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis: int = 0, keepdims: bool = False):
    x = _val(a)
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)
    if not isinstance(a, Var):
        return out
    soft = np.exp(x - lse)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return a.tape._record("logsumexp", out, (a.id,), vjp)


def cross_entropy(logits, labels: np.ndarray):
    """Mean negative log-softmax of the labelled class; logits are classes x samples."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    picked = take(logits, (labels, np.arange(n)))
    return mean(logsumexp(logits, axis=0) - picked)


# --- reverse pass ---------------------------------------------------------


def backward(tape: Tape, root) -> dict[int, np.ndarray]:
    """Adjoints of a scalar root with respect to every node recorded up to it.

    Nodes the root does not depend on get zero gradients.
    """
    root_id = root.id if isinstance(root, Var) else int(root)
    if isinstance(root, Var) and root.tape is not tape:
        raise ValueError("root belongs to a different tape")
    root_val = tape.nodes[root_id].value
    if root_val.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root_val.shape}")

    adj: dict[int, np.ndarray] = {root_id: np.ones_like(root_val)}
    for nid in range(root_id, -1, -1):
        g = adj.get(nid)
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid in adj:
                adj[pid] = adj[pid] + pg
            else:
                adj[pid] = pg
    grads = {}
    for nid in range(root_id + 1):
        value = tape.nodes[nid].value
        g = adj.get(nid)
        grads[nid] = np.zeros_like(value) if g is None else np.asarray(g).reshape(value.shape)
    tape.adjoints = grads
    return grads


def grad(tape: Tape, root, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Convenience wrapper: gradients of ``root`` for the given leaves only."""
    grads = backward(tape, root)
    return [grads[v.id] for v in wrt]
