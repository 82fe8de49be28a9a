"""Reverse-mode differentiation over dense 2-D float64 matrices.

A :class:`Graph` records a Wengert list while values are computed eagerly.
The same op table drives three things: eager building, :func:`eval_graph`
(a pure replay with fresh inputs) and :func:`backward`.

Module-level op functions (``tanh``, ``matmul``, ...) accept either graph
variables or plain ``ndarray`` values.  On plain arrays they run the very
same forward kernel without recording anything, which is what rollouts use.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class GraphError(ValueError):
    """Raised for malformed graphs; ``node_id`` names the offending node."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message if node_id is None else f"node {node_id}: {message}")
        self.node_id = node_id


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# op table


class Op(NamedTuple):
    forward: Callable
    backward: Callable


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _bmm(a: np.ndarray, b: np.ndarray, group: int) -> np.ndarray:
    g = a.shape[0] // group
    out = np.matmul(a.reshape(g, group, group), b.reshape(g, group, b.shape[1]))
    return out.reshape(a.shape[0], b.shape[1])


def _bmm_backward(go, ins, out, at):
    a, b = ins
    n = at["group"]
    g = a.shape[0] // n
    a3 = a.reshape(g, n, n)
    b3 = b.reshape(g, n, b.shape[1])
    go3 = go.reshape(g, n, go.shape[1])
    ga = np.matmul(go3, b3.transpose(0, 2, 1)).reshape(a.shape)
    gb = np.matmul(a3.transpose(0, 2, 1), go3).reshape(b.shape)
    return ga, gb


def _bmm_nt(a: np.ndarray, b: np.ndarray, group: int) -> np.ndarray:
    g = a.shape[0] // group
    a3 = a.reshape(g, group, a.shape[1])
    b3 = b.reshape(g, group, b.shape[1])
    return np.matmul(a3, b3.transpose(0, 2, 1)).reshape(a.shape[0], group)


def _bmm_nt_backward(go, ins, out, at):
    a, b = ins
    n = at["group"]
    g = a.shape[0] // n
    go3 = go.reshape(g, n, n)
    ga = np.matmul(go3, b.reshape(g, n, b.shape[1])).reshape(a.shape)
    gb = np.matmul(go3.transpose(0, 2, 1), a.reshape(g, n, a.shape[1])).reshape(b.shape)
    return ga, gb


def _block_t(x: np.ndarray, group: int) -> np.ndarray:
    return x.reshape(-1, group, group).transpose(0, 2, 1).reshape(x.shape)


def _reduce(x: np.ndarray, axis, fn) -> np.ndarray:
    if axis is None:
        return np.asarray(fn(x), dtype=DTYPE).reshape(1, 1)
    return fn(x, axis=axis, keepdims=True)


def _sum_backward(go, ins, out, at):
    return (np.broadcast_to(go, ins[0].shape).copy(),)


def _mean_backward(go, ins, out, at):
    x = ins[0]
    axis = at.get("axis")
    count = x.size if axis is None else x.shape[axis]
    return (np.broadcast_to(go / count, x.shape).copy(),)


def _concat_backward(go, ins, out, at):
    axis = at["axis"]
    bounds = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return tuple(np.split(go, bounds, axis=axis))


def _slice_backward(go, ins, out, at):
    g = np.zeros_like(ins[0])
    g[at["rows"], at["cols"]] = go
    return (g,)


def _softmax_backward(go, ins, out, at):
    return (out * (go - (go * out).sum(axis=1, keepdims=True)),)


def _log_softmax_backward(go, ins, out, at):
    p = np.exp(out)
    return (go - p * go.sum(axis=1, keepdims=True),)


OPS: dict[str, Op] = {
    "identity": Op(lambda i, at: i[0], lambda go, i, o, at: (go,)),
    "matmul": Op(
        lambda i, at: i[0] @ i[1],
        lambda go, i, o, at: (go @ i[1].T, i[0].T @ go),
    ),
    "bmm": Op(lambda i, at: _bmm(i[0], i[1], at["group"]), _bmm_backward),
    "bmm_nt": Op(lambda i, at: _bmm_nt(i[0], i[1], at["group"]), _bmm_nt_backward),
    "block_transpose": Op(
        lambda i, at: _block_t(i[0], at["group"]),
        lambda go, i, o, at: (_block_t(go, at["group"]),),
    ),
    "add": Op(
        lambda i, at: i[0] + i[1],
        lambda go, i, o, at: (_unbroadcast(go, i[0].shape), _unbroadcast(go, i[1].shape)),
    ),
    "sub": Op(
        lambda i, at: i[0] - i[1],
        lambda go, i, o, at: (_unbroadcast(go, i[0].shape), _unbroadcast(-go, i[1].shape)),
    ),
    "mul": Op(
        lambda i, at: i[0] * i[1],
        lambda go, i, o, at: (
            _unbroadcast(go * i[1], i[0].shape),
            _unbroadcast(go * i[0], i[1].shape),
        ),
    ),
    "div": Op(
        lambda i, at: i[0] / i[1],
        lambda go, i, o, at: (
            _unbroadcast(go / i[1], i[0].shape),
            _unbroadcast(-go * i[0] / (i[1] * i[1]), i[1].shape),
        ),
    ),
    "scale": Op(lambda i, at: i[0] * at["c"], lambda go, i, o, at: (go * at["c"],)),
    "tanh": Op(lambda i, at: np.tanh(i[0]), lambda go, i, o, at: (go * (1.0 - o * o),)),
    "sigmoid": Op(
        lambda i, at: 0.5 * (1.0 + np.tanh(0.5 * i[0])),
        lambda go, i, o, at: (go * o * (1.0 - o),),
    ),
    "exp": Op(lambda i, at: np.exp(i[0]), lambda go, i, o, at: (go * o,)),
    "log": Op(lambda i, at: np.log(i[0]), lambda go, i, o, at: (go / i[0],)),
    "abs": Op(lambda i, at: np.abs(i[0]), lambda go, i, o, at: (go * np.sign(i[0]),)),
    "sqrt": Op(lambda i, at: np.sqrt(i[0]), lambda go, i, o, at: (go * 0.5 / o,)),
    "softmax": Op(lambda i, at: _softmax(i[0]), _softmax_backward),
    "log_softmax": Op(lambda i, at: _log_softmax(i[0]), _log_softmax_backward),
    "sum": Op(lambda i, at: _reduce(i[0], at.get("axis"), np.sum), _sum_backward),
    "mean": Op(lambda i, at: _reduce(i[0], at.get("axis"), np.mean), _mean_backward),
    "concat": Op(lambda i, at: np.concatenate(i, axis=at["axis"]), _concat_backward),
    "slice": Op(lambda i, at: i[0][at["rows"], at["cols"]], _slice_backward),
    "reshape": Op(
        lambda i, at: i[0].reshape(at["shape"]),
        lambda go, i, o, at: (go.reshape(i[0].shape),),
    ),
    "transpose": Op(lambda i, at: i[0].T, lambda go, i, o, at: (go.T,)),
    # straight-through estimators subtract a detached copy of themselves
    "detach": Op(lambda i, at: i[0], lambda go, i, o, at: (None,)),
}

SOURCE_KINDS = ("input", "param", "const")


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamArray:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = as_matrix(self.value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def init_uniform(rng: np.random.Generator, name: str, fan_in: int, shape: tuple[int, int]) -> ParamArray:
    bound = 1.0 / np.sqrt(fan_in)
    return ParamArray(name, rng.uniform(-bound, bound, size=shape))


def sgd_step(params, lr: float) -> list[str]:
    """Plain gradient descent.  Returns names of arrays skipped for non-finite grads."""
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    skipped = []
    for p in params:
        if np.isfinite(p.grad).all():
            if lr:
                p.value -= lr * p.grad
        else:
            skipped.append(p.name)
            logger.warning("skipping update of %s: non-finite gradient", p.name)
        p.zero_grad()
    return skipped


# ---------------------------------------------------------------------------
# graph


class Node:
    __slots__ = ("id", "op", "inputs", "attrs", "value", "name")

    def __init__(self, id, op, inputs, attrs, value, name=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name


class Graph:
    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[int, ParamArray] = {}
        self.outputs: dict[str, int] = {}
        self.check_finite = check_finite
        self._param_nodes: dict[str, Var] = {}

    def _add(self, op, inputs, attrs, value, name=None) -> Var:
        node = Node(len(self.nodes), op, inputs, attrs, value, name)
        self.nodes.append(node)
        return Var(self, node.id)

    def input(self, name: str, value) -> Var:
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        v = self._add("input", (), {}, as_matrix(value), name)
        self.inputs[name] = v.id
        return v

    def const(self, value) -> Var:
        return self._add("const", (), {}, as_matrix(value))

    def param(self, p: ParamArray) -> Var:
        if p.name in self._param_nodes:
            return self._param_nodes[p.name]
        v = self._add("param", (), {}, p.value, p.name)
        self.params[v.id] = p
        self._param_nodes[p.name] = v
        return v

    def output(self, name: str, var: Var) -> Var:
        self.outputs[name] = var.id
        return var

    def apply(self, op: str, *args, **attrs) -> Var:
        ids = tuple(self._lift(a).id for a in args)
        values = [self.nodes[i].value for i in ids]
        node_id = len(self.nodes)
        value = _run_forward(op, values, attrs, node_id, self.check_finite)
        return self._add(op, ids, attrs, value)

    def _lift(self, a) -> Var:
        if isinstance(a, Var):
            if a.graph is not self:
                raise GraphError("variable belongs to another graph")
            return a
        return self.const(a)

    def value(self, var: Var) -> np.ndarray:
        return self.nodes[var.id].value


def _run_forward(op, values, attrs, node_id, check_finite) -> np.ndarray:
    try:
        fn = OPS[op].forward
    except KeyError:
        raise GraphError(f"unknown op-kind {op!r}", node_id) from None
    try:
        with np.errstate(all="ignore"):
            value = fn(values, attrs)
    except ValueError as exc:
        shapes = [v.shape for v in values]
        raise ShapeError(f"{op} on shapes {shapes}: {exc}", node_id) from None
    if value.ndim != 2:
        raise ShapeError(f"{op} produced shape {value.shape}", node_id)
    if check_finite and not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value", node_id)
    return value


def eval_graph(graph: Graph, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Replay ``graph`` with fresh input bindings; the graph itself is untouched."""
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise GraphError(f"unbound graph inputs: {sorted(missing)}")
    vals: list[np.ndarray] = []
    for node in graph.nodes:
        if node.op == "input":
            v = as_matrix(inputs[node.name])
            if v.shape != node.value.shape:
                raise ShapeError(f"input {node.name!r} has shape {v.shape}, graph expects {node.value.shape}", node.id)
            vals.append(v)
        elif node.op == "param":
            vals.append(graph.params[node.id].value)
        elif node.op == "const":
            vals.append(node.value)
        else:
            vals.append(_run_forward(node.op, [vals[i] for i in node.inputs], node.attrs, node.id, True))
    return {name: vals[i].copy() for name, i in graph.outputs.items()}


def backward(graph: Graph, seed: Var | str) -> dict[str, np.ndarray]:
    """Accumulate d(seed)/d(param) into every graph parameter's ``grad``."""
    seed_id = graph.outputs[seed] if isinstance(seed, str) else seed.id
    seed_val = graph.nodes[seed_id].value
    if seed_val.shape != (1, 1):
        raise GraphError(f"seed output must be scalar, has shape {seed_val.shape}", seed_id)
    grads: dict[int, np.ndarray] = {seed_id: np.ones((1, 1))}
    for node in reversed(graph.nodes[: seed_id + 1]):
        go = grads.pop(node.id, None)
        if go is None:
            continue
        if node.op == "param":
            graph.params[node.id].grad += go
            continue
        if node.op in SOURCE_KINDS:
            continue
        ins = [graph.nodes[i].value for i in node.inputs]
        for i, g in zip(node.inputs, OPS[node.op].backward(go, ins, node.value, node.attrs)):
            if g is None or graph.nodes[i].op in ("input", "const"):
                continue
            if i in grads:
                grads[i] = grads[i] + g
            else:
                grads[i] = g
    return {p.name: p.grad.copy() for p in graph.params.values()}


# ---------------------------------------------------------------------------
# variables and dual-mode functions


class Var:
    __slots__ = ("graph", "id")
    # make ndarray-op-Var defer to the reflected Var methods
    __array_ufunc__ = None

    def __init__(self, graph: Graph, id: int):
        self.graph = graph
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        node = self.graph.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if np.isscalar(o):
            return scale(self, o)
        return mul(self, o)

    def __rmul__(self, o):
        if np.isscalar(o):
            return scale(self, o)
        return mul(o, self)

    def __truediv__(self, o):
        if np.isscalar(o):
            return scale(self, 1.0 / o)
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    @property
    def T(self):
        return transpose(self)


def _call(op: str, *args, **attrs):
    for a in args:
        if isinstance(a, Var):
            return a.graph.apply(op, *args, **attrs)
    return OPS[op].forward([as_matrix(a) if not isinstance(a, np.ndarray) else a for a in args], attrs)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def matmul(a, b):
    return _call("matmul", a, b)


def bmm(a, b, group: int):
    """Block-diagonal product: rows are consecutive groups of ``group`` agents."""
    return _call("bmm", a, b, group=group)


def bmm_nt(a, b, group: int):
    """Per group: ``a_g @ b_g.T`` -> rows of ``group`` columns."""
    return _call("bmm_nt", a, b, group=group)


def block_transpose(a, group: int):
    """Transpose each consecutive ``group`` x ``group`` block."""
    return _call("block_transpose", a, group=group)


def add(a, b):
    return _call("add", a, b)


def sub(a, b):
    return _call("sub", a, b)


def mul(a, b):
    return _call("mul", a, b)


def div(a, b):
    return _call("div", a, b)


def scale(a, c: float):
    return _call("scale", a, c=float(c))


def tanh(a):
    return _call("tanh", a)


def sigmoid(a):
    return _call("sigmoid", a)


def exp(a):
    return _call("exp", a)


def log(a):
    return _call("log", a)


def abs_(a):
    return _call("abs", a)


def sqrt(a):
    return _call("sqrt", a)


def softmax(a):
    return _call("softmax", a)


def log_softmax(a):
    return _call("log_softmax", a)


def sum_(a, axis=None):
    return _call("sum", a, axis=axis)


def mean(a, axis=None):
    return _call("mean", a, axis=axis)


def concat(xs, axis: int = 1):
    return _call("concat", *xs, axis=axis)


def slice_(a, rows=slice(None), cols=slice(None)):
    return _call("slice", a, rows=rows, cols=cols)


def reshape(a, shape):
    return _call("reshape", a, shape=tuple(shape))


def transpose(a):
    return _call("transpose", a)


def detach(a):
    return _call("detach", a)


def straight_through(hard, soft):
    """Forward value ``hard``; gradient flows as if the output were ``soft``."""
    if isinstance(soft, Var):
        return add(hard, sub(soft, detach(soft)))
    return hard
