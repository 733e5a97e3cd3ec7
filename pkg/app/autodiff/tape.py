"""Reverse-mode automatic differentiation over small dense arrays.

Every primitive returns a :class:`Var` that remembers its parents and one
vector-Jacobian product per parent. :func:`backward` walks the graph in
reverse topological order and accumulates gradients.

Broadcasting is limited to what the networks and rollouts need: operands
share a shape, or one of them is a scalar / a row that repeats along the
leading batch axis.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from app.core.errors import NumericError, ShapeError

ArrayLike = Union["Var", np.ndarray, float, int]
Vjp = Callable[[np.ndarray], np.ndarray]


@dataclass
class ParamVector:
    """Flat parameter vector with a named segment layout.

    Attributes:
        values: 1-D float array holding every parameter
        layout: ordered (name, shape) segments; their sizes sum to ``len(values)``
    """
    values: np.ndarray
    layout: List[Tuple[str, Tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not self.layout:
            self.layout = [("values", (self.values.size,))]
        self.layout = [(name, tuple(int(s) for s in shape)) for name, shape in self.layout]
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if expected != self.values.size:
            raise ShapeError(
                f"Parameter layout covers {expected} values but vector has {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericError("Parameter vector contains non-finite values", node="params")

    @property
    def size(self) -> int:
        return int(self.values.size)

    def offsets(self) -> List[Tuple[str, int, int, Tuple[int, ...]]]:
        """Return (name, start, stop, shape) for every segment."""
        out = []
        start = 0
        for name, shape in self.layout:
            stop = start + int(np.prod(shape))
            out.append((name, start, stop, shape))
            start = stop
        return out

    def segment(self, name: str) -> np.ndarray:
        """Return a reshaped copy of one named segment."""
        for seg_name, start, stop, shape in self.offsets():
            if seg_name == name:
                return self.values[start:stop].reshape(shape).copy()
        raise KeyError(f"Unknown parameter segment: {name}")

    def with_values(self, values: np.ndarray) -> "ParamVector":
        """Return a new vector with the same layout and new values."""
        return ParamVector(np.array(values, dtype=np.float64), list(self.layout))

    def copy(self) -> "ParamVector":
        return self.with_values(self.values.copy())


class Var:
    """A value on the gradient tape."""

    __slots__ = ("value", "grad", "parents", "vjps", "op", "requires_grad")
    # numpy operands defer to the reflected Var operators
    __array_ufunc__ = None

    def __init__(self, value, parents: Sequence["Var"] = (), vjps: Sequence[Vjp] = (),
                 op: str = "const", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.op = op
        self.requires_grad = requires_grad

    @classmethod
    def leaf(cls, value) -> "Var":
        """Create a differentiable input."""
        return cls(np.array(value, dtype=np.float64), op="leaf", requires_grad=True)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape})"

    def __add__(self, other: ArrayLike) -> "Var":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Var":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Var":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Var":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Var":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Var":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Var":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Var":
        return div(other, self)

    def __neg__(self) -> "Var":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Var":
        return matmul(self, other)


def lift(x: ArrayLike) -> Var:
    """Wrap constants as non-differentiable tape values."""
    return x if isinstance(x, Var) else Var(x)


def _node(value: np.ndarray, op: str, links: Sequence[Tuple[Var, Vjp]]) -> Var:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericError(f"Non-finite value produced by '{op}'", node=op)
    active = [(parent, vjp) for parent, vjp in links if parent.requires_grad]
    if not active:
        return Var(value, op=op)
    return Var(value, [p for p, _ in active], [v for _, v in active], op=op, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Var, b: Var, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"'{op}' cannot combine shapes {a.shape} and {b.shape}") from e


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a, b, "add")
    return _node(a.value + b.value, "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a, b, "sub")
    return _node(a.value - b.value, "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a, b, "mul")
    return _node(a.value * b.value, "mul", [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def div(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = lift(a), lift(b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value
    return _node(out, "div", [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    ])


def square(a: ArrayLike) -> Var:
    a = lift(a)
    return _node(a.value ** 2, "square", [(a, lambda g: 2.0 * a.value * g)])


def power(a: ArrayLike, p: float) -> Var:
    a = lift(a)
    return _node(a.value ** p, "power", [(a, lambda g: p * a.value ** (p - 1.0) * g)])


def sqrt(a: ArrayLike) -> Var:
    a = lift(a)
    out = np.sqrt(a.value)
    return _node(out, "sqrt", [(a, lambda g: 0.5 * g / out)])


def exp(a: ArrayLike) -> Var:
    a = lift(a)
    out = np.exp(a.value)
    return _node(out, "exp", [(a, lambda g: g * out)])


def log(a: ArrayLike) -> Var:
    a = lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _node(out, "log", [(a, lambda g: g / a.value)])


def sin(a: ArrayLike) -> Var:
    a = lift(a)
    return _node(np.sin(a.value), "sin", [(a, lambda g: g * np.cos(a.value))])


def cos(a: ArrayLike) -> Var:
    a = lift(a)
    return _node(np.cos(a.value), "cos", [(a, lambda g: -g * np.sin(a.value))])


# Activations

def tanh(a: ArrayLike) -> Var:
    a = lift(a)
    out = np.tanh(a.value)
    return _node(out, "tanh", [(a, lambda g: g * (1.0 - out ** 2))])


def relu(a: ArrayLike) -> Var:
    a = lift(a)
    mask = a.value > 0.0
    return _node(np.where(mask, a.value, 0.0), "relu", [(a, lambda g: g * mask)])


def silu(a: ArrayLike) -> Var:
    a = lift(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    return _node(a.value * s, "silu", [(a, lambda g: g * (s + a.value * s * (1.0 - s)))])


ACTIVATIONS = {"tanh": tanh, "relu": relu, "silu": silu}


# Linear algebra and reductions

def matmul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = lift(a), lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"'matmul' cannot combine shapes {a.shape} and {b.shape}")
    return _node(a.value @ b.value, "matmul", [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def affine(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Var:
    """Compute ``x @ weight + bias`` for a batch of rows."""
    return add(matmul(x, weight), bias)


def reduce_sum(a: ArrayLike, axis=None) -> Var:
    a = lift(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(a.shape, float(g))
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _node(out, "reduce_sum", [(a, vjp)])


def reduce_mean(a: ArrayLike, axis=None) -> Var:
    a = lift(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / count)


def minimum(a: ArrayLike, ceiling: float) -> Var:
    """Clip from above; the subgradient at the ceiling is 0."""
    a = lift(a)
    mask = a.value < ceiling
    return _node(np.minimum(a.value, ceiling), "minimum", [(a, lambda g: g * mask)])


def clip(a: ArrayLike, low: float, high: float) -> Var:
    a = lift(a)
    mask = (a.value >= low) & (a.value <= high)
    return _node(np.clip(a.value, low, high), "clip", [(a, lambda g: g * mask)])


def elementwise_min(a: ArrayLike, b: ArrayLike) -> Var:
    """Pointwise minimum; ties send the gradient to ``a``."""
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"'elementwise_min' needs equal shapes, got {a.shape} and {b.shape}")
    pick_a = a.value <= b.value
    return _node(np.where(pick_a, a.value, b.value), "elementwise_min", [
        (a, lambda g: g * pick_a),
        (b, lambda g: g * ~pick_a),
    ])


def stack_max(items: Sequence[ArrayLike]) -> Var:
    """Pointwise maximum over equally shaped inputs; the argmax input gets the gradient."""
    items = [lift(item) for item in items]
    shapes = {item.shape for item in items}
    if len(shapes) != 1:
        raise ShapeError(f"'stack_max' needs equal shapes, got {sorted(shapes)}")
    stacked = np.stack([item.value for item in items])
    winner = np.argmax(stacked, axis=0)
    links = []
    for k, item in enumerate(items):
        mask = winner == k
        links.append((item, lambda g, mask=mask: g * mask))
    return _node(stacked.max(axis=0), "stack_max", links)


def concat(items: Sequence[ArrayLike], axis: int = -1) -> Var:
    items = [lift(item) for item in items]
    values = [item.value for item in items]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as e:
        raise ShapeError(f"'concat' cannot join shapes {[v.shape for v in values]}") from e
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    links = []
    for k, item in enumerate(items):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        links.append((item, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return _node(out, "concat", links)


def segment(flat: ArrayLike, start: int, stop: int, shape: Tuple[int, ...]) -> Var:
    """Take ``flat[start:stop]`` reshaped to ``shape``."""
    flat = lift(flat)

    def vjp(g):
        full = np.zeros(flat.shape)
        full[start:stop] = g.reshape(-1)
        return full

    return _node(flat.value[start:stop].reshape(shape), "segment", [(flat, vjp)])


def column(a: ArrayLike, index: int) -> Var:
    """Take column ``index`` of a 2-D batch."""
    a = lift(a)

    def vjp(g):
        full = np.zeros(a.shape)
        full[:, index] = g
        return full

    return _node(a.value[:, index], "column", [(a, vjp)])


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Var:
    a = lift(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"'reshape' cannot turn {a.shape} into {shape}") from e
    return _node(out, "reshape", [(a, lambda g: np.reshape(g, a.shape))])


def custom(value: np.ndarray, parent: ArrayLike, vjp: Vjp, op: str) -> Var:
    """Insert an externally computed function with a hand-written VJP."""
    return _node(value, op, [(lift(parent), vjp)])


# Reverse sweep

def _topological_order(root: Var) -> List[Var]:
    order: List[Var] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every differentiable node."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {root.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(_topological_order(root)):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = np.asarray(vjp(node.grad), dtype=np.float64)
            if not np.all(np.isfinite(contribution)):
                raise NumericError(
                    f"Non-finite gradient flowing back through '{node.op}'", node=node.op
                )
            parent.grad = contribution if parent.grad is None else parent.grad + contribution


def value_and_grad(fn: Callable[[Var], Var], x: np.ndarray) -> Tuple[float, np.ndarray]:
    """Evaluate a scalar program and its gradient with respect to an array input."""
    leaf = Var.leaf(x)
    out = lift(fn(leaf))
    if out.value.size != 1:
        raise ShapeError(f"Expected a scalar program, got output shape {out.shape}")
    if not out.requires_grad:
        return float(out.value), np.zeros_like(leaf.value)
    backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return float(out.value), grad


def gradient(loss: Callable[[Var], Var], params: ParamVector) -> ParamVector:
    """Return d(loss)/d(params) as a vector with the same layout."""
    _, grad = value_and_grad(loss, params.values)
    return params.with_values(grad)
