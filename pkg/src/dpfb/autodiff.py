"""Reverse-mode automatic differentiation over dense float64 arrays.

Nodes are created eagerly: every operation computes its value immediately and
records its parents, so the recorded nodes double as a replayable graph.
Gradients can be produced either as plain arrays (:func:`backward`) or as new
nodes (:func:`grad` with ``create_graph=True`` / :func:`grad_graph`), in which
case they are themselves differentiable.  That second mode is what allows a
loss built from ``||grad phi||^2`` to be differentiated with respect to the
parameters of ``phi``.

Every primitive registers a forward function and a vector-Jacobian rule.  The
rules are written once against a small operator namespace and run either on
arrays (plain backward) or on nodes (graph-building backward); since the rules
only use primitives from the same set, the primitive set is closed under
differentiation.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.01

_counter = itertools.count()
_recording = [True]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class GraphError(RuntimeError):
    """Raised for structural misuse of a graph (non-scalar root, bad binding)."""


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording parents (values only)."""
    _recording.append(False)
    try:
        yield
    finally:
        _recording.pop()


def is_recording() -> bool:
    return _recording[-1]


class Node:
    """A value in the computation graph.

    Leaves have ``op is None``.  ``kind`` distinguishes trainable or bound
    leaves (``"leaf"``) from constants, which never receive gradients.
    """

    __slots__ = ("id", "value", "op", "parents", "attrs", "requires_grad", "kind", "name")
    __array_priority__ = 1000

    def __init__(self, value, op=None, parents=(), attrs=None, requires_grad=False,
                 kind="node", name=None):
        self.id = next(_counter)
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.kind = kind
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def __repr__(self) -> str:
        label = self.name or (self.op or self.kind)
        return f"Node({label}#{self.id}, shape={self.shape})"

    def __hash__(self) -> int:
        return self.id

    def __eq__(self, other) -> bool:
        return self is other

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def leaf(value, name: str | None = None, requires_grad: bool = True) -> Node:
    """Create a differentiable leaf (parameter or bound input)."""
    arr = np.array(value, dtype=np.float64)
    return Node(arr, requires_grad=requires_grad, kind="leaf", name=name)


def constant(value) -> Node:
    return Node(np.array(value, dtype=np.float64), kind="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitive registry

def ZERO_DERIVATIVE(*_args, **_kwargs):
    """Marker vjp for piecewise-constant primitives (derivative zero a.e.)."""
    raise AssertionError("never called")


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple] | None  # None: derivative not available


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, vjp):
    PRIMITIVES[name] = Primitive(name, forward, vjp)


def register_primitive(name: str, forward: Callable[..., np.ndarray],
                       vjp: Callable[..., tuple] | None = None) -> None:
    """Add a primitive.  ``vjp(F, g, out, *parents, **attrs)`` returns one
    cotangent per parent using only the operations on ``F``; without it the
    primitive can be evaluated but not differentiated."""
    if name in PRIMITIVES:
        raise ValueError(f"primitive {name!r} already registered")
    _register(name, forward, vjp)


def apply(name: str, *parents, **attrs) -> Node:
    """Apply a registered primitive by name."""
    if name not in PRIMITIVES:
        raise GraphError(f"unknown primitive {name!r}")
    return _apply(name, [as_node(p) for p in parents], attrs or None)


def _apply(name: str, parents: Sequence[Node], attrs: dict | None = None) -> Node:
    prim = PRIMITIVES[name]
    try:
        value = prim.forward(*[p.value for p in parents], **(attrs or {}))
    except ShapeError as exc:
        shapes = ", ".join(str(p.shape) for p in parents)
        raise ShapeError(f"{name}: incompatible operand shapes ({shapes}): {exc}") from None
    value = np.asarray(value, dtype=np.float64)
    if not _recording[-1]:
        return Node(value, kind="const")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        # nothing upstream can receive a gradient; keep it cheap but replayable
        return Node(value, name, tuple(parents), attrs, False)
    return Node(value, name, tuple(parents), attrs, True)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def _check_bias_broadcast(a, b):
    # equal shapes, scalars, or a matrix against a row/column vector
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"broadcast of {a.shape} with {b.shape} not supported")
    _broadcast_shape(a, b)


def _binary(fn):
    def forward(a, b):
        _check_bias_broadcast(a, b)
        return fn(a, b)
    return forward


def _sum_to_forward(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a.copy()
    lead = a.ndim - len(shape)
    out = a.sum(axis=tuple(range(lead))) if lead > 0 else a
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _broadcast_forward(a, shape):
    try:
        return np.broadcast_to(a, tuple(shape)).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def _matmul_forward(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape}@{b.shape}")
    return a @ b


def _reduce_shape(shape, axis, keepdims):
    if axis is None:
        return (1,) * len(shape) if keepdims else ()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def _keepdims_shape(shape, axis):
    return _reduce_shape(shape, axis, True)


def _concat_forward(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def _slice_forward(a, index):
    try:
        return np.array(a[index])
    except IndexError as exc:
        raise ShapeError(str(exc)) from None


def _scatter_forward(g, shape, index):
    out = np.zeros(shape)
    out[index] = g
    return out


def _reshape_forward(a, shape):
    try:
        return a.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _log_forward(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


# VJP rules: rule(F, g, out, parents, **attrs) -> tuple of parent cotangents.
# ``F`` is either the array namespace or the node namespace below.

def _vjp_add(F, g, out, a, b):
    return F.sum_to(g, a.shape), F.sum_to(g, b.shape)


def _vjp_sub(F, g, out, a, b):
    return F.sum_to(g, a.shape), F.sum_to(F.neg(g), b.shape)


def _vjp_mul(F, g, out, a, b):
    return F.sum_to(F.mul(g, b), a.shape), F.sum_to(F.mul(g, a), b.shape)


def _vjp_div(F, g, out, a, b):
    ga = F.div(g, b)
    gb = F.neg(F.mul(ga, out))
    return F.sum_to(ga, a.shape), F.sum_to(gb, b.shape)


_register("add", _binary(np.add), _vjp_add)
_register("sub", _binary(np.subtract), _vjp_sub)
_register("mul", _binary(np.multiply), _vjp_mul)
_register("div", _binary(np.divide), _vjp_div)
_register("neg", np.negative, lambda F, g, out, a: (F.neg(g),))
_register("matmul", _matmul_forward,
          lambda F, g, out, a, b: (F.matmul(g, F.transpose(b)), F.matmul(F.transpose(a), g)))
_register("transpose", lambda a: a.T.copy(), lambda F, g, out, a: (F.transpose(g),))
_register("leaky_relu", lambda a: np.where(a >= 0, a, LEAKY_SLOPE * a),
          lambda F, g, out, a: (F.mul(g, F.leaky_slope(a)),))
# derivative of leaky ReLU; piecewise constant so its own derivative is zero
_register("leaky_slope", lambda a: np.where(a >= 0, 1.0, LEAKY_SLOPE), ZERO_DERIVATIVE)
_register("exp", np.exp, lambda F, g, out, a: (F.mul(g, out),))
_register("log", _log_forward, lambda F, g, out, a: (F.div(g, a),))
_register("softplus", _softplus, lambda F, g, out, a: (F.mul(g, F.sigmoid(a)),))
_register("sigmoid", _sigmoid,
          lambda F, g, out, a: (F.mul(g, F.mul(out, F.rsub1(out))),))
_register("tanh", np.tanh,
          lambda F, g, out, a: (F.mul(g, F.rsub1(F.square(out))),))
_register("square", np.square, lambda F, g, out, a: (F.mul(F.mul(g, a), 2.0),))
_register("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
          lambda F, g, out, a, axis=None, keepdims=False: (
              F.broadcast_to(F.reshape(g, _keepdims_shape(a.shape, axis)), a.shape),))


def _vjp_mean(F, g, out, a, axis=None, keepdims=False):
    count = int(np.prod(a.shape)) // max(1, int(np.prod(out.shape)))
    gb = F.broadcast_to(F.reshape(g, _keepdims_shape(a.shape, axis)), a.shape)
    return (F.mul(gb, 1.0 / count),)


_register("mean", lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
          _vjp_mean)
_register("sum_to", _sum_to_forward,
          lambda F, g, out, a, shape: (F.broadcast_to(g, a.shape),))
_register("broadcast_to", _broadcast_forward,
          lambda F, g, out, a, shape: (F.sum_to(g, a.shape),))
_register("reshape", _reshape_forward,
          lambda F, g, out, a, shape: (F.reshape(g, a.shape),))


def _vjp_concat(F, g, out, *parts, axis):
    grads = []
    start = 0
    for p in parts:
        stop = start + p.shape[axis]
        index = [slice(None)] * g_ndim(out)
        index[axis] = slice(start, stop)
        grads.append(F.slice(g, tuple(index)))
        start = stop
    return tuple(grads)


def g_ndim(x):
    return len(x.shape)


_register("concat", _concat_forward, _vjp_concat)
_register("slice", _slice_forward,
          lambda F, g, out, a, index: (F.scatter(g, a.shape, index),))
_register("scatter", _scatter_forward,
          lambda F, g, out, a, shape, index: (F.slice(g, index),))
# identity forward, blocks all gradient flow
_register("stop_gradient", lambda a: a.copy(), ZERO_DERIVATIVE)


class _ArrayOps:
    """Namespace used when VJP rules run on plain arrays."""

    neg = staticmethod(np.negative)
    square = staticmethod(np.square)
    sigmoid = staticmethod(_sigmoid)

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def div(a, b):
        return a / b

    @staticmethod
    def rsub1(a):
        return 1.0 - a

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def leaky_slope(a):
        return np.where(a >= 0, 1.0, LEAKY_SLOPE)

    @staticmethod
    def sum_to(g, shape):
        return _sum_to_forward(g, shape)

    @staticmethod
    def broadcast_to(g, shape):
        return np.broadcast_to(g, shape)

    @staticmethod
    def reshape(g, shape):
        return np.reshape(g, shape)

    @staticmethod
    def slice(g, index):
        return g[index]

    @staticmethod
    def scatter(g, shape, index):
        return _scatter_forward(g, shape, index)


class _NodeOps:
    """Namespace used when VJP rules must build differentiable nodes."""

    @staticmethod
    def neg(a):
        return neg(a)

    @staticmethod
    def square(a):
        return square(a)

    @staticmethod
    def sigmoid(a):
        return sigmoid(a)

    @staticmethod
    def mul(a, b):
        return mul(a, b)

    @staticmethod
    def div(a, b):
        return div(a, b)

    @staticmethod
    def rsub1(a):
        return sub(1.0, a)

    @staticmethod
    def matmul(a, b):
        return matmul(a, b)

    @staticmethod
    def transpose(a):
        return transpose(a)

    @staticmethod
    def leaky_slope(a):
        return _apply("leaky_slope", (a,))

    @staticmethod
    def sum_to(g, shape):
        return sum_to(g, shape)

    @staticmethod
    def broadcast_to(g, shape):
        return broadcast_to(g, shape)

    @staticmethod
    def reshape(g, shape):
        return reshape(g, shape)

    @staticmethod
    def slice(g, index):
        return slice_(g, index)

    @staticmethod
    def scatter(g, shape, index):
        return _apply("scatter", (g,), {"shape": tuple(shape), "index": index})


# ---------------------------------------------------------------------------
# public operations

def add(a, b):
    return _apply("add", (as_node(a), as_node(b)))


def sub(a, b):
    return _apply("sub", (as_node(a), as_node(b)))


def mul(a, b):
    return _apply("mul", (as_node(a), as_node(b)))


def div(a, b):
    return _apply("div", (as_node(a), as_node(b)))


def neg(a):
    return _apply("neg", (as_node(a),))


def matmul(a, b):
    return _apply("matmul", (as_node(a), as_node(b)))


def transpose(a):
    return _apply("transpose", (as_node(a),))


def leaky_relu(a):
    return _apply("leaky_relu", (as_node(a),))


def exp(a):
    return _apply("exp", (as_node(a),))


def log(a):
    return _apply("log", (as_node(a),))


def softplus(a):
    return _apply("softplus", (as_node(a),))


def sigmoid(a):
    return _apply("sigmoid", (as_node(a),))


def tanh(a):
    return _apply("tanh", (as_node(a),))


def square(a):
    return _apply("square", (as_node(a),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _apply("sum", (as_node(a),), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return _apply("mean", (as_node(a),), {"axis": axis, "keepdims": keepdims})


def sum_to(a, shape):
    a = as_node(a)
    if a.shape == tuple(shape):
        return a
    return _apply("sum_to", (a,), {"shape": tuple(shape)})


def broadcast_to(a, shape):
    a = as_node(a)
    if a.shape == tuple(shape):
        return a
    return _apply("broadcast_to", (a,), {"shape": tuple(shape)})


def reshape(a, shape):
    a = as_node(a)
    if a.shape == tuple(shape):
        return a
    return _apply("reshape", (a,), {"shape": tuple(shape)})


def concat(parts: Sequence, axis: int = -1):
    nodes = tuple(as_node(p) for p in parts)
    if len(nodes) == 1:
        return nodes[0]
    ndim = nodes[0].value.ndim
    return _apply("concat", nodes, {"axis": axis % ndim})


def slice_(a, index):
    if not isinstance(index, tuple):
        index = (index,)
    return _apply("slice", (as_node(a),), {"index": index})


def stop_gradient(a):
    return _apply("stop_gradient", (as_node(a),))


# ---------------------------------------------------------------------------
# graphs

def _topo_order(outputs: Iterable[Node], floor: int = -1) -> list[Node]:
    # nodes created before ``floor`` are not visited
    seen: dict[int, Node] = {}
    stack = list(outputs)
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(p for p in node.parents if p.id not in seen and p.id >= floor)
    # parents are always created before children
    return [seen[k] for k in sorted(seen)]


@dataclass
class Graph:
    """Immutable record of the nodes needed to compute ``outputs``.

    ``nodes`` is in topological order (parents precede children).
    """

    outputs: tuple[Node, ...]
    nodes: list[Node] = field(init=False, repr=False)

    def __post_init__(self):
        self.outputs = tuple(self.outputs)
        self.nodes = _topo_order(self.outputs)

    @classmethod
    def of(cls, *outputs: Node) -> "Graph":
        return cls(outputs)

    @property
    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "leaf"]

    def __len__(self) -> int:
        return len(self.nodes)


def forward(graph: Graph, bindings: Mapping[Node, Any] | None = None) -> dict[Node, np.ndarray]:
    """Replay ``graph`` with leaves rebound to new values.

    Leaves missing from ``bindings`` keep the value they were created with.
    Returns the value of every node.
    """
    bindings = bindings or {}
    values: dict[Node, np.ndarray] = {}
    for node in graph.nodes:
        if node.op is None:
            if node in bindings:
                val = np.asarray(bindings[node], dtype=np.float64)
                if val.shape != node.shape:
                    raise ShapeError(f"binding for {node!r} has shape {val.shape}, expected {node.shape}")
                values[node] = val
            else:
                values[node] = node.value
            continue
        prim = PRIMITIVES[node.op]
        args = [values[p] for p in node.parents]
        try:
            values[node] = np.asarray(prim.forward(*args, **(node.attrs or {})), dtype=np.float64)
        except ShapeError as exc:
            raise ShapeError(f"node {node!r}: {exc}") from None
    return values


def _relevant(order: list[Node], wrt: set[int] | None) -> set[int]:
    rel: set[int] = set()
    for node in order:
        if wrt is None:
            if node.requires_grad and (node.op is None or any(p.id in rel for p in node.parents)):
                rel.add(node.id)
        elif node.id in wrt or any(p.id in rel for p in node.parents):
            rel.add(node.id)
    return rel


def _propagate(root: Node, wrt: set[int] | None, create_graph: bool):
    if root.value.size != 1:
        raise GraphError(f"gradient root must be scalar, got shape {root.shape}")
    # a node created before every wrt node cannot depend on one
    order = _topo_order([root], min(wrt) if wrt else -1)
    rel = _relevant(order, wrt)
    F = _NodeOps if create_graph else _ArrayOps
    grads: dict[int, Any] = {}
    if root.id in rel:
        grads[root.id] = constant(np.ones(root.shape)) if create_graph else np.ones(root.shape)
    stop = wrt if wrt is not None else set()
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node.op is None or node.id in stop:
            continue
        prim = PRIMITIVES[node.op]
        if prim.vjp is ZERO_DERIVATIVE:
            continue
        if prim.vjp is None:
            raise GraphError(f"primitive {prim.name!r} has no registered derivative")
        if create_graph:
            pgrads = prim.vjp(F, g, node, *node.parents, **(node.attrs or {}))
        else:
            pgrads = prim.vjp(F, g, node.value, *[p.value for p in node.parents],
                              **(node.attrs or {}))
        for parent, pg in zip(node.parents, pgrads):
            if parent.id not in rel:
                continue
            prev = grads.get(parent.id)
            if prev is None:
                grads[parent.id] = pg
            else:
                grads[parent.id] = add(prev, pg) if create_graph else prev + pg
    return order, grads


def backward(graph: Graph | Node, root: Node | None = None) -> dict[Node, np.ndarray]:
    """Return d root / d leaf for every leaf of ``graph`` (zeros where unreachable)."""
    if isinstance(graph, Node):
        graph, root = Graph.of(graph), graph
    if root is None:
        if len(graph.outputs) != 1:
            raise GraphError("backward needs an explicit root for multi-output graphs")
        root = graph.outputs[0]
    if root.value.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    _, grads = _propagate(root, None, create_graph=False)
    out = {}
    for node in graph.leaves:
        g = grads.get(node.id)
        out[node] = np.array(g, dtype=np.float64).reshape(node.shape) if g is not None else np.zeros(node.shape)
    return out


def grad(root: Node, wrt: Sequence[Node], create_graph: bool = False) -> list:
    """Gradients of scalar ``root`` with respect to arbitrary nodes ``wrt``.

    With ``create_graph`` the results are nodes that can be differentiated
    again; otherwise they are arrays.
    """
    if not wrt:
        raise GraphError("wrt must be non-empty")
    ids = {n.id for n in wrt}
    _, grads = _propagate(root, ids, create_graph)
    result = []
    for n in wrt:
        g = grads.get(n.id)
        if g is None:
            g = constant(np.zeros(n.shape)) if create_graph else np.zeros(n.shape)
        elif not create_graph:
            g = np.array(g, dtype=np.float64).reshape(n.shape)
        result.append(g)
    return result


def grad_graph(graph: Graph | Node, root: Node, wrt: Sequence[Node]) -> Graph:
    """Build a new graph whose outputs are d root / d wrt, differentiable again."""
    del graph  # root already carries its ancestry
    return Graph(tuple(grad(root, wrt, create_graph=True)))
