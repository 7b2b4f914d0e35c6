"""Reverse-mode automatic differentiation over an explicit expression graph.

Every node holds a float64 array (scalars are 0-d arrays). The adjoint pass
does not produce numbers directly: it emits new graph nodes, so the result of
:func:`gradient` is itself an expression that can be differentiated again.
That is what lets a physics residual (containing input derivatives of a
network) be differentiated with respect to the network weights.

Graphs are static. Values are computed eagerly when a node is built, and
:class:`Program` re-evaluates a fixed set of outputs after variables are
rebound, which is how the training loop avoids rebuilding the graph on every
step.

Typical use::

    x = Variable("x", 3.0)
    f = x * x
    (df,) = gradient(f, [x])      # df is an Expr, df.value == 6.0
    (d2f,) = gradient(df, [x])    # d2f.value == 2.0
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import ConfigurationError, NumericError

__all__ = [
    "Expr",
    "Constant",
    "Variable",
    "VarSet",
    "Program",
    "as_expr",
    "tanh",
    "exp",
    "log",
    "sum",
    "mean",
    "evaluate",
    "gradient",
    "hvp",
    "HVPOperator",
]

_FLOAT = np.float64


def _arr(value):
    return np.asarray(value, dtype=_FLOAT)


class Expr:
    """Base graph node.

    Subclasses implement ``_forward`` (value from children values) and
    ``_adjoint`` (child adjoints, as Exprs, from the adjoint of this node).
    """

    kind = "composite"
    __slots__ = ("children", "value", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, *children):
        self.children = children
        if any(c.value is None for c in children):
            self.value = None
        else:
            self.value = self._forward()

    # -- graph protocol -------------------------------------------------
    def _forward(self):
        raise NotImplementedError

    def _adjoint(self, grad, needs):
        raise NotImplementedError

    @property
    def shape(self):
        return self._shape()

    def _shape(self):
        return self.value.shape

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, -as_expr(other))

    def __rsub__(self, other):
        return add(other, -self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        other = as_expr(other)
        if isinstance(other, Constant):
            return mul(self, Constant(1.0 / other.value))
        return mul(self, Pow(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, Pow(self, -1.0))

    def __neg__(self):
        return Scale(self, -1.0)

    def __pow__(self, p):
        if isinstance(p, Expr):
            raise ConfigurationError("only constant real exponents are supported")
        p = float(p)
        if p == 1.0:
            return self
        return Pow(self, p)

    def __matmul__(self, other):
        return MatMul(self, as_expr(other))

    def __rmatmul__(self, other):
        return MatMul(as_expr(other), self)

    def __getitem__(self, idx):
        return GetItem(self, idx)

    @property
    def T(self):
        return Transpose(self)

    def sum(self, axis=None, keepdims=False):
        return Sum(self, axis, keepdims)

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"<{type(self).__name__} kind={self.kind} shape={shape}>"


class Constant(Expr):
    kind = "constant"
    __slots__ = ()

    def __init__(self, value):
        self.children = ()
        self.value = _arr(value)

    def _forward(self):
        return self.value

    def _adjoint(self, grad, needs):
        return ()


class Variable(Expr):
    """Leaf whose value can be rebound between evaluations."""

    kind = "variable"
    __slots__ = ("name",)

    def __init__(self, name: str, value=None):
        self.name = name
        self.children = ()
        self.value = None if value is None else _arr(value)

    def bind(self, value):
        self.value = _arr(value)

    def _forward(self):
        if self.value is None:
            raise ConfigurationError(f"variable {self.name!r} is unbound")
        return self.value

    def _adjoint(self, grad, needs):
        return ()

    def __repr__(self):
        return f"<Variable {self.name!r}>"


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return Constant(value)


def _is_unit(e):
    return isinstance(e, Constant) and e.value.ndim == 0 and e.value == 1.0


# ---------------------------------------------------------------------------
# elementwise nodes
# ---------------------------------------------------------------------------


class Add(Expr):
    kind = "sum"
    __slots__ = ()

    def _forward(self):
        a, b = self.children
        return a.value + b.value

    def _adjoint(self, grad, needs):
        a, b = self.children
        return (sum_to(grad, a.shape) if needs[0] else None,
                sum_to(grad, b.shape) if needs[1] else None)


class Mul(Expr):
    kind = "product"
    __slots__ = ()

    def _forward(self):
        a, b = self.children
        return a.value * b.value

    def _adjoint(self, grad, needs):
        a, b = self.children
        return (sum_to(mul(grad, b), a.shape) if needs[0] else None,
                sum_to(mul(grad, a), b.shape) if needs[1] else None)


class Scale(Expr):
    """Multiplication by a fixed real number."""

    kind = "product"
    __slots__ = ("c",)

    def __init__(self, a, c):
        self.c = float(c)
        super().__init__(a)

    def _forward(self):
        return self.c * self.children[0].value

    def _adjoint(self, grad, needs):
        return (Scale(grad, self.c),)


class Pow(Expr):
    kind = "power"
    __slots__ = ("p",)

    def __init__(self, a, p):
        self.p = float(p)
        super().__init__(a)

    def _forward(self):
        base = self.children[0].value
        if not float(self.p).is_integer() and np.any(base < 0):
            raise NumericError(f"real power {self.p} of a negative base")
        if self.p < 0 and np.any(base == 0):
            raise NumericError(f"power {self.p} of zero")
        return base ** self.p

    def _adjoint(self, grad, needs):
        (a,) = self.children
        p = self.p
        if p < 1.0 and not float(p).is_integer() and np.any(a.value == 0):
            raise NumericError(f"power {p} is not differentiable at 0")
        if p == 2.0:
            local = Scale(a, 2.0)
        elif p - 1.0 == 0.0:
            return (grad,)
        else:
            local = Scale(a ** (p - 1.0), p)
        return (mul(grad, local),)


class Tanh(Expr):
    kind = "tanh"
    __slots__ = ()

    def _forward(self):
        return np.tanh(self.children[0].value)

    def _adjoint(self, grad, needs):
        # d tanh = 1 - tanh^2, expressed through this node so nesting works
        return (mul(grad, add(Constant(1.0), -mul(self, self))),)


class Exp(Expr):
    __slots__ = ()

    def _forward(self):
        return np.exp(self.children[0].value)

    def _adjoint(self, grad, needs):
        return (mul(grad, self),)


class Log(Expr):
    __slots__ = ()

    def _forward(self):
        v = self.children[0].value
        if np.any(v <= 0):
            raise NumericError("log of a non-positive value")
        return np.log(v)

    def _adjoint(self, grad, needs):
        return (mul(grad, Pow(self.children[0], -1.0)),)


# ---------------------------------------------------------------------------
# structural ("composite") nodes
# ---------------------------------------------------------------------------


class MatMul(Expr):
    __slots__ = ()

    def _forward(self):
        a, b = self.children
        return a.value @ b.value

    def _adjoint(self, grad, needs):
        a, b = self.children
        return (MatMul(grad, Transpose(b)) if needs[0] else None,
                MatMul(Transpose(a), grad) if needs[1] else None)


class Transpose(Expr):
    __slots__ = ()

    def _forward(self):
        return self.children[0].value.T

    def _adjoint(self, grad, needs):
        return (Transpose(grad),)


class Sum(Expr):
    __slots__ = ("axis", "keepdims")

    def __init__(self, a, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        super().__init__(a)

    def _forward(self):
        return np.sum(self.children[0].value, axis=self.axis, keepdims=self.keepdims)

    def _adjoint(self, grad, needs):
        (a,) = self.children
        shape = a.shape
        if self.axis is not None and not self.keepdims:
            kept = list(shape)
            kept[self.axis] = 1
            grad = Reshape(grad, tuple(kept))
        return (BroadcastTo(grad, shape),)


class Reshape(Expr):
    __slots__ = ("new_shape",)

    def __init__(self, a, new_shape):
        self.new_shape = tuple(new_shape)
        super().__init__(a)

    def _forward(self):
        return np.reshape(self.children[0].value, self.new_shape)

    def _adjoint(self, grad, needs):
        return (Reshape(grad, self.children[0].shape),)


class BroadcastTo(Expr):
    __slots__ = ("target",)

    def __init__(self, a, target):
        self.target = tuple(target)
        super().__init__(a)

    def _forward(self):
        return np.broadcast_to(self.children[0].value, self.target)

    def _adjoint(self, grad, needs):
        return (sum_to(grad, self.children[0].shape),)


class SumTo(Expr):
    """Reduce a broadcast result back to ``target`` shape."""

    __slots__ = ("target",)

    def __init__(self, a, target):
        self.target = tuple(target)
        super().__init__(a)

    def _forward(self):
        return _sum_to_shape(self.children[0].value, self.target)

    def _adjoint(self, grad, needs):
        return (BroadcastTo(grad, self.children[0].shape),)


class GetItem(Expr):
    __slots__ = ("idx",)

    def __init__(self, a, idx):
        self.idx = idx
        super().__init__(a)

    def _forward(self):
        return self.children[0].value[self.idx]

    def _adjoint(self, grad, needs):
        return (Scatter(grad, self.idx, self.children[0].shape),)


class Scatter(Expr):
    """Embed ``a`` at ``idx`` inside a zero array of ``target`` shape."""

    __slots__ = ("idx", "target")

    def __init__(self, a, idx, target):
        self.idx = idx
        self.target = tuple(target)
        super().__init__(a)

    def _forward(self):
        out = np.zeros(self.target, dtype=_FLOAT)
        out[self.idx] = self.children[0].value
        return out

    def _adjoint(self, grad, needs):
        return (GetItem(grad, self.idx),)


def _sum_to_shape(value, target):
    if value.shape == target:
        return value
    ndiff = value.ndim - len(target)
    if ndiff:
        value = value.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(target) if n == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value.reshape(target)


# ---------------------------------------------------------------------------
# constructors with light simplification
# ---------------------------------------------------------------------------


def add(a, b) -> Expr:
    return Add(as_expr(a), as_expr(b))


def mul(a, b) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if _is_unit(a):
        return b
    if _is_unit(b):
        return a
    if isinstance(a, Constant) and a.value.ndim == 0:
        return Scale(b, float(a.value))
    if isinstance(b, Constant) and b.value.ndim == 0:
        return Scale(a, float(b.value))
    return Mul(a, b)


def sum_to(grad: Expr, shape) -> Expr:
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    return SumTo(grad, shape)


def tanh(a) -> Expr:
    return Tanh(as_expr(a))


def exp(a) -> Expr:
    return Exp(as_expr(a))


def log(a) -> Expr:
    return Log(as_expr(a))


def sum(a, axis=None, keepdims=False) -> Expr:  # noqa: A001 - mirrors numpy
    return Sum(as_expr(a), axis, keepdims)


def mean(a, axis=None) -> Expr:
    a = as_expr(a)
    n = a.value.size if axis is None else a.shape[axis]
    return Scale(Sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class VarSet(OrderedDict):
    """Ordered ``name -> value`` bindings; order fixes gradient positions."""

    def __setitem__(self, key, value):
        super().__setitem__(key, _arr(value))


def _toposort(outputs: Iterable[Expr]) -> list[Expr]:
    order, seen = [], set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node.children:
                if id(child) not in seen:
                    stack.append((child, False))
    return order


class Program:
    """Fixed outputs with a cached evaluation order.

    ``run`` rebinds variables by name, recomputes every interior node once
    and returns the output values.
    """

    def __init__(self, outputs: Sequence[Expr]):
        self.outputs = list(outputs)
        self.order = _toposort(self.outputs)
        self.variables = {}
        for node in self.order:
            if isinstance(node, Variable):
                if node.name in self.variables and self.variables[node.name] is not node:
                    raise ConfigurationError(f"duplicate variable name {node.name!r}")
                self.variables[node.name] = node
        self._interior = [n for n in self.order if n.children]

    def run(self, bindings: Mapping[str, object] | None = None) -> list[np.ndarray]:
        if bindings:
            for name, value in bindings.items():
                var = self.variables.get(name)
                if var is not None:
                    var.bind(value)
        for name, var in self.variables.items():
            if var.value is None:
                raise ConfigurationError(f"variable {name!r} is unbound")
        for node in self._interior:
            node.value = node._forward()
        return [out.value for out in self.outputs]


def evaluate(expr: Expr | Sequence[Expr], vars: Mapping[str, object] | None = None):
    """Evaluate one expression (or a list) under the given variable bindings."""
    single = isinstance(expr, Expr)
    values = Program([expr] if single else list(expr)).run(vars)
    return values[0] if single else values


def gradient(expr: Expr, wrt: Sequence[Variable], vars: Mapping[str, object] | None = None,
             seed: Expr | None = None) -> list[Expr]:
    """Adjoints of ``expr`` with respect to each node in ``wrt``.

    Non-scalar ``expr`` is differentiated as ``sum(expr)`` unless ``seed``
    supplies the output cotangent. Returned expressions stay differentiable.
    """
    if vars:
        evaluate(expr, vars)
    if expr.value is None:
        raise ConfigurationError("expression has unbound variables")
    wrt = list(wrt)
    order = _toposort([expr])
    targets = {id(w) for w in wrt}
    depends = {}
    for node in order:
        depends[id(node)] = id(node) in targets or any(depends[id(c)] for c in node.children)

    if seed is None:
        seed = Constant(1.0) if expr.value.ndim == 0 else Constant(np.ones(expr.shape))
    adjoints = {id(expr): seed}
    for node in reversed(order):
        g = adjoints.get(id(node))
        if g is None or not node.children or not depends[id(node)]:
            continue
        needs = [depends[id(c)] for c in node.children]
        for child, child_grad, need in zip(node.children, node._adjoint(g, needs), needs):
            if not need or child_grad is None:
                continue
            prev = adjoints.get(id(child))
            adjoints[id(child)] = child_grad if prev is None else Add(prev, child_grad)

    out = []
    for w in wrt:
        g = adjoints.get(id(w))
        if g is None:
            g = Constant(np.zeros(w.shape))
        elif not np.all(np.isfinite(g.value)):
            raise NumericError(f"non-finite derivative with respect to {getattr(w, 'name', w)!r}")
        out.append(g)
    return out


def _flat_dot(exprs: Sequence[Expr], vecs: Sequence[Expr]) -> Expr:
    total = None
    for g, v in zip(exprs, vecs):
        term = Sum(mul(g, v))
        total = term if total is None else Add(total, term)
    return total


def hvp(loss: Expr, params: Sequence[Variable], v: Sequence) -> list[np.ndarray]:
    """Hessian-vector product: derivative of <grad loss, v> w.r.t. ``params``."""
    params = list(params)
    v = [_arr(x) for x in v]
    if len(v) != len(params) or any(p.shape != x.shape for p, x in zip(params, v)):
        raise ConfigurationError("vector does not match parameter shapes")
    grads = gradient(loss, params)
    hv = gradient(_flat_dot(grads, [Constant(x) for x in v]), params)
    return [h.value.copy() for h in hv]


class HVPOperator:
    """Reusable ``v -> H v`` for a fixed loss graph, acting on flat vectors.

    The probe direction is a graph variable, so repeated products (power
    iteration) only re-run a compiled program.
    """

    def __init__(self, loss: Expr, params: Sequence[Variable]):
        self.params = list(params)
        self.shapes = [p.shape for p in self.params]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.size = int(np.sum(self.sizes))
        self._dirs = [Variable(f"__hvp_dir_{i}", np.zeros(s)) for i, s in enumerate(self.shapes)]
        grads = gradient(loss, self.params)
        hv = gradient(_flat_dot(grads, self._dirs), self.params)
        self._program = Program(hv)

    def _split(self, flat):
        parts, start = [], 0
        for n, s in zip(self.sizes, self.shapes):
            parts.append(flat[start:start + n].reshape(s))
            start += n
        return parts

    def __call__(self, vector):
        vector = _arr(vector)
        if vector.shape != (self.size,):
            raise ConfigurationError(f"expected vector of length {self.size}, got {vector.shape}")
        bindings = {d.name: part for d, part in zip(self._dirs, self._split(vector))}
        return np.concatenate([h.ravel() for h in self._program.run(bindings)])
