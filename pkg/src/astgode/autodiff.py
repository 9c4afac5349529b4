"""Define-by-run reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Variable` objects that
require gradients.  ``Tape.backward`` walks the record in exact reverse order, so
gradient accumulation order (and therefore the result) is deterministic.

Variables that do not require gradients are never recorded, which makes the same
operator code usable for cheap "value only" evaluation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NaNProducedError",
    "Tape",
    "Variable",
    "Gradients",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "einsum",
    "transpose",
    "reshape",
    "concat",
    "sum",
    "mean",
    "relu",
    "sigmoid",
    "tanh",
    "square",
    "softmax",
    "hadamard",
    "vjp",
    "value_and_vjp",
    "rng",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NaNProducedError(FloatingPointError):
    """An operation produced NaN from finite inputs."""


def rng(seed) -> np.random.Generator:
    """numpy PCG64 generator from an int seed or a ``SeedSequence``."""
    return np.random.Generator(np.random.PCG64(seed))


class _Node:
    __slots__ = ("op", "parents", "backward", "shape")

    def __init__(self, op, parents, backward, shape):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Tape:
    """Ordered record of primitive operations.

    Node ids are indices into the record; a node's inputs always have smaller ids.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def variable(self, value, requires_grad: bool = True) -> "Variable":
        arr = np.array(value, dtype=np.float64)
        if not requires_grad:
            return Variable(arr, self, None)
        if not np.all(np.isfinite(arr)):
            raise ValueError("differentiable leaves must be finite")
        return Variable(arr, self, self._record("leaf", (), None, arr.shape))

    def constant(self, value) -> "Variable":
        return Variable(np.asarray(value, dtype=np.float64), self, None)

    def _record(self, op, parents, backward, shape) -> int:
        self._nodes.append(_Node(op, parents, backward, shape))
        return len(self._nodes) - 1

    def backprop(self, seeds: Iterable[tuple["Variable", np.ndarray]]) -> "Gradients":
        """Propagate cotangents from ``seeds`` back to every recorded node."""
        grads: list = [None] * len(self._nodes)
        for var, ct in seeds:
            if var.tape is not self:
                raise ValueError("seed variable belongs to a different tape")
            ct = np.asarray(ct, dtype=np.float64)
            if ct.shape != var.shape:
                raise ShapeError(f"cotangent shape {ct.shape} does not match output shape {var.shape}")
            if var.node is None:
                continue
            grads[var.node] = ct.copy() if grads[var.node] is None else grads[var.node] + ct
        for idx in range(len(self._nodes) - 1, -1, -1):
            g = grads[idx]
            node = self._nodes[idx]
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        return Gradients(self, grads)

    def backward(self, root: "Variable") -> "Gradients":
        if root.value.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
        return self.backprop([(root, np.ones(root.shape))])


class Gradients:
    """Gradient lookup; unreachable or non-differentiable variables map to zeros."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: "Variable") -> np.ndarray:
        if var.tape is not self._tape:
            raise ValueError("variable belongs to a different tape")
        if var.node is None or self._grads[var.node] is None:
            return np.zeros(var.shape)
        return self._grads[var.node]


class Variable:
    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: Tape, node: int | None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Variable(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> Gradients:
        return self.tape.backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


# -- plumbing ----------------------------------------------------------------


def _tape_of(args) -> Tape:
    recording = None
    fallback = None
    for a in args:
        if isinstance(a, Variable):
            if a.requires_grad:
                if recording is not None and a.tape is not recording:
                    raise ValueError("operands recorded on different tapes")
                recording = a.tape
            elif fallback is None:
                fallback = a.tape
    if recording is not None:
        return recording
    return fallback if fallback is not None else Tape()


def _val(x) -> np.ndarray:
    if isinstance(x, Variable):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _has_nan(arrays) -> bool:
    return any(np.isnan(a).any() for a in arrays)


def _make(op: str, args: Sequence, out: np.ndarray, backward: Callable) -> Variable:
    """Wrap ``out`` as a Variable, recording ``backward`` if any input needs it."""
    vals = [_val(a) for a in args]
    if np.isnan(out).any() and not _has_nan(vals):
        raise NaNProducedError(f"{op} produced NaN from finite inputs")
    tape = _tape_of(args)
    parents = tuple(a.node if isinstance(a, Variable) else None for a in args)
    if all(p is None for p in parents):
        return Variable(out, tape, None)
    return Variable(out, tape, tape._record(op, parents, backward, out.shape))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------


def add(x, y) -> Variable:
    a, b = _val(x), _val(y)
    _broadcast_shape("add", a, b)
    return _make("add", (x, y), a + b,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(x, y) -> Variable:
    a, b = _val(x), _val(y)
    _broadcast_shape("sub", a, b)
    return _make("sub", (x, y), a - b,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(x, y) -> Variable:
    a, b = _val(x), _val(y)
    _broadcast_shape("mul", a, b)
    return _make("mul", (x, y), a * b,
                 lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))


hadamard = mul


def div(x, y) -> Variable:
    a, b = _val(x), _val(y)
    _broadcast_shape("div", a, b)
    out = a / b
    return _make("div", (x, y), out,
                 lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)))


def neg(x) -> Variable:
    return _make("neg", (x,), -_val(x), lambda g: (-g,))


def scale(x, c: float) -> Variable:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _make("scale", (x,), _val(x) * c, lambda g: (g * c,))


def square(x) -> Variable:
    a = _val(x)
    return _make("square", (x,), a * a, lambda g: (2.0 * a * g,))


def relu(x) -> Variable:
    a = _val(x)
    pos = a > 0
    return _make("relu", (x,), np.where(pos, a, 0.0), lambda g: (g * pos,))


def sigmoid(x) -> Variable:
    a = _val(x)
    out = np.empty_like(a)
    p = a >= 0
    out[p] = 1.0 / (1.0 + np.exp(-a[p]))
    e = np.exp(a[~p])
    out[~p] = e / (1.0 + e)
    return _make("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Variable:
    out = np.tanh(_val(x))
    return _make("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax(x, axis: int = -1) -> Variable:
    a = _val(x)
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", (x,), out, back)


# -- linear algebra and shape ------------------------------------------------


def matmul(x, y) -> Variable:
    """Matrix product with batching over leading axes (numpy ``@`` semantics)."""
    a, b = _val(x), _val(y)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = a @ b
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", (x, y), out, back)


def _parse_einsum(spec: str, n: int):
    if "..." in spec or "->" not in spec:
        raise ValueError("einsum spec must be explicit ('ab,bc->ac') without ellipsis")
    lhs, out = spec.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n:
        raise ValueError(f"einsum spec names {len(ins)} operands, got {n}")
    for s in ins + [out]:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in einsum term {s!r}")
    return ins, out


def einsum(spec: str, *operands) -> Variable:
    """Explicit-form einsum over one or more operands (no repeated or ellipsis indices)."""
    ins, out_s = _parse_einsum(spec, len(operands))
    vals = [_val(o) for o in operands]
    for s, v in zip(ins, vals):
        if len(s) != v.ndim:
            raise ShapeError(f"einsum term {s!r} does not match operand shape {v.shape}")
    try:
        out = np.einsum(spec, *vals, optimize=len(vals) > 2)
    except ValueError as exc:
        shapes = " and ".join(str(v.shape) for v in vals)
        raise ShapeError(f"einsum {spec!r}: shapes {shapes} conflict ({exc})") from None

    def back(g):
        grads = []
        for i, (s, v) in enumerate(zip(ins, vals)):
            others = [ins[j] for j in range(len(ins)) if j != i]
            present = set(out_s).union(*others) if others else set(out_s)
            kept = "".join(c for c in s if c in present)
            terms = ",".join([out_s] + others)
            gi = np.einsum(f"{terms}->{kept}", g, *[vals[j] for j in range(len(vals)) if j != i])
            if kept != s:
                expand = [ax for ax, c in enumerate(s) if c not in present]
                gi = np.broadcast_to(np.expand_dims(gi, tuple(expand)), v.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _make("einsum", tuple(operands), np.asarray(out, dtype=np.float64), back)


def transpose(x, axes: Sequence[int] | None = None) -> Variable:
    a = _val(x)
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", (x,), np.transpose(a, axes), lambda g: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> Variable:
    a = _val(x)
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return _make("reshape", (x,), out, lambda g: (g.reshape(a.shape),))


def concat(xs: Sequence, axis: int = 0) -> Variable:
    vals = [_val(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat along axis {axis}: shapes {[v.shape for v in vals]} conflict") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", tuple(xs), out, back)


def sum(x, axis=None, keepdims: bool = False) -> Variable:  # noqa: A001
    a = _val(x)
    out = np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", (x,), out, back)


def mean(x, axis=None, keepdims: bool = False) -> Variable:
    a = _val(x)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- vector-Jacobian products --------------------------------------------------


def value_and_vjp(fn: Callable, primals: Sequence, cotangent) -> tuple[np.ndarray, tuple]:
    """Evaluate ``fn`` at ``primals`` and pull ``cotangent`` back through it.

    ``fn`` receives one Variable per primal and returns a Variable.  One forward
    record and one reverse sweep are used.
    """
    tape = Tape()
    leaves = [tape.variable(p) for p in primals]
    out = fn(*leaves)
    ct = np.asarray(cotangent, dtype=np.float64)
    if ct.shape != out.shape:
        raise ShapeError(f"cotangent shape {ct.shape} does not match output shape {out.shape}")
    grads = tape.backprop([(out, ct)])
    return out.value, tuple(grads[v] for v in leaves)


def vjp(fn: Callable, primals: Sequence, cotangent) -> tuple:
    """Return ``cotangentᵀ J`` for each primal input of ``fn``."""
    return value_and_vjp(fn, primals, cotangent)[1]
