"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order. Each
recorded node keeps its operands (other nodes or captured constants) and
its forward value; :func:`backward` walks the tape in reverse and
accumulates vector-Jacobian products into the leaves.

The module-level functions (``log``, ``softplus``, ...) accept either
:class:`Var` operands or plain arrays. With plain arrays they evaluate the
same forward rule eagerly, so model code written against them works both
for differentiation and for ordinary evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy import special


class NumericDomainError(ValueError):
    """An operand fell outside the domain of a primitive."""

    def __init__(self, op: str, message: str = "argument outside domain"):
        self.op = op
        super().__init__(f"{op}: {message}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _matmul_vjp(g, out, a, b):
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g * b, g * a


def _sum_forward(x, axis=None):
    return np.sum(x, axis=axis)


def _sum_vjp(g, out, x, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _check_positive(op):
    def check(x, **_):
        if not np.all(x > 0):
            raise NumericDomainError(op, "argument must be positive")
    return check


def _check_nonzero(x, **_):
    if np.any(x == 0):
        raise NumericDomainError("reciprocal", "division by zero")


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]
    check: Callable[..., None] | None = None


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("add", lambda a, b: a + b,
                  lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
        Primitive("mul", lambda a, b: a * b,
                  lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
        Primitive("matmul", lambda a, b: a @ b, _matmul_vjp),
        Primitive("log", np.log, lambda g, out, x: (g / x,), _check_positive("log")),
        Primitive("exp", np.exp, lambda g, out, x: (g * out,)),
        Primitive("softplus", _softplus, lambda g, out, x: (g * special.expit(x),)),
        # derivative at exactly 0 is taken as 0
        Primitive("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),)),
        Primitive("square", np.square, lambda g, out, x: (2.0 * g * x,)),
        Primitive("reciprocal", lambda x: 1.0 / x, lambda g, out, x: (-g * out * out,), _check_nonzero),
        Primitive("lgamma", special.gammaln, lambda g, out, x: (g * special.digamma(x),),
                  _check_positive("lgamma")),
        Primitive("sum", _sum_forward, _sum_vjp),
        # log(1 - exp(-x)), stable for small x
        Primitive("log1mexp", lambda x: np.log(-np.expm1(-x)), lambda g, out, x: (g / np.expm1(x),),
                  _check_positive("log1mexp")),
    ]
}


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    # keep numpy from broadcasting over Var objects; reflected ops take over
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        raise NotImplementedError("only x**2 is a primitive; compose other powers with exp/log")

    def sum(self, axis=None):
        return sum_(self, axis=axis)


class Tape:
    """Single-writer record of primitive operations.

    ``nodes[i]`` is ``(primitive_name, operands, attrs)``, where each operand
    is either an int (index of an earlier node) or a captured constant
    array. Leaves have primitive name ``None``.
    """

    def __init__(self):
        self.nodes: list[tuple[str | None, tuple, dict]] = []
        self.values: list[np.ndarray] = []
        self.leaves: list[Var] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value) -> Var:
        """Add a differentiable leaf."""
        self.nodes.append((None, (), {}))
        self.values.append(np.array(value, dtype=np.float64))
        var = Var(self, len(self.nodes) - 1)
        self.leaves.append(var)
        return var

    def record(self, op: str, inputs: list, **attrs) -> Var:
        prim = PRIMITIVES[op]
        operands = []
        args = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise ValueError(f"{op}: operand belongs to a different tape")
                operands.append(x.index)
                args.append(self.values[x.index])
            else:
                arr = np.asarray(x, dtype=np.float64)
                operands.append(arr)
                args.append(arr)
        if prim.check is not None:
            prim.check(*args, **attrs)
        out = np.asarray(prim.forward(*args, **attrs), dtype=np.float64)
        self.nodes.append((op, tuple(operands), attrs))
        self.values.append(out)
        return Var(self, len(self.nodes) - 1)

    def replay(self, leaf_values: dict[Var, Any] | None = None) -> list[np.ndarray]:
        """Re-run every node forward, optionally with new leaf values."""
        leaf_values = leaf_values or {}
        overrides = {v.index: np.asarray(x, dtype=np.float64) for v, x in leaf_values.items()}
        values: list[np.ndarray] = []
        for i, (op, operands, attrs) in enumerate(self.nodes):
            if op is None:
                values.append(overrides.get(i, self.values[i]))
                continue
            args = [values[x] if isinstance(x, int) else x for x in operands]
            prim = PRIMITIVES[op]
            if prim.check is not None:
                prim.check(*args, **attrs)
            values.append(np.asarray(prim.forward(*args, **attrs), dtype=np.float64))
        return values


def backward(tape: Tape, root: Var) -> dict[Var, np.ndarray]:
    """Gradient of the scalar ``root`` with respect to every leaf of ``tape``."""
    if root.tape is not tape:
        raise ValueError("root is not on this tape")
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    adjoints: list[np.ndarray | None] = [None] * (root.index + 1)
    adjoints[root.index] = np.ones_like(root.value)
    for i in range(root.index, -1, -1):
        g = adjoints[i]
        op, operands, attrs = tape.nodes[i]
        if g is None or op is None:
            continue
        args = [tape.values[x] if isinstance(x, int) else x for x in operands]
        grads = PRIMITIVES[op].vjp(g, tape.values[i], *args, **attrs)
        for x, gx in zip(operands, grads):
            if isinstance(x, int):
                adjoints[x] = gx if adjoints[x] is None else adjoints[x] + gx
    out = {}
    for leaf in tape.leaves:
        g = adjoints[leaf.index] if leaf.index <= root.index else None
        out[leaf] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
    return out


def _apply(op: str, *inputs, **attrs):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError(f"{op}: operands on different tapes")
            tape = x.tape
    if tape is not None:
        return tape.record(op, list(inputs), **attrs)
    prim = PRIMITIVES[op]
    args = [np.asarray(x, dtype=np.float64) for x in inputs]
    if prim.check is not None:
        prim.check(*args, **attrs)
    return prim.forward(*args, **attrs)


def record(op: str, inputs: list, **attrs):
    """Apply primitive ``op``; records on a tape when any input is a :class:`Var`."""
    return _apply(op, *inputs, **attrs)


def add(a, b):
    return _apply("add", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def neg(a):
    return _apply("mul", a, -1.0)


def matmul(a, b):
    return _apply("matmul", a, b)


def log(x):
    return _apply("log", x)


def exp(x):
    return _apply("exp", x)


def softplus(x):
    return _apply("softplus", x)


def relu(x):
    return _apply("relu", x)


def square(x):
    return _apply("square", x)


def reciprocal(x):
    return _apply("reciprocal", x)


def lgamma(x):
    return _apply("lgamma", x)


def log1mexp(x):
    return _apply("log1mexp", x)


def sum_(x, axis=None):
    return _apply("sum", x, axis=axis)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
