"""Tape-style reverse-mode autodiff over dense float64 matrices.

Every value is a 2-D ``numpy`` array. A ``Node`` holds the forward value,
its parents and a closure that pushes the incoming gradient to them.
Graphs are rebuilt per minibatch; parameters are long-lived leaf nodes
kept in a ``ParamStore``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dims, got shape {arr.shape}")
    return arr


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        requires_grad: bool | None = None,
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = _as_matrix(value)
        self.parents = tuple(parents)
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 node, got {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value) -> Node:
    return Node(value, requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    _check_broadcast(a, b, "add")
    out = Node(a.value + b.value, (a, b), "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    _check_broadcast(a, b, "sub")
    out = Node(a.value - b.value, (a, b), "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    _check_broadcast(a, b, "mul")
    out = Node(a.value * b.value, (a, b), "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    out._backward = backward
    return out


def div(a, b) -> Node:
    a, b = _node(a), _node(b)
    _check_broadcast(a, b, "div")
    out = Node(a.value / b.value, (a, b), "div")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.value / b.value**2, b.shape))

    out._backward = backward
    return out


def square(x) -> Node:
    x = _node(x)
    out = Node(x.value**2, (x,), "square")
    out._backward = lambda g: x._accumulate(2.0 * x.value * g)
    return out


def sqrt(x) -> Node:
    x = _node(x)
    val = np.sqrt(x.value)
    out = Node(val, (x,), "sqrt")
    out._backward = lambda g: x._accumulate(g / (2.0 * val))
    return out


def exp(x) -> Node:
    x = _node(x)
    val = np.exp(x.value)
    out = Node(val, (x,), "exp")
    out._backward = lambda g: x._accumulate(g * val)
    return out


def log(x) -> Node:
    x = _node(x)
    out = Node(np.log(x.value), (x,), "log")
    out._backward = lambda g: x._accumulate(g / x.value)
    return out


def relu(x) -> Node:
    x = _node(x)
    mask = x.value > 0
    out = Node(np.where(mask, x.value, 0.0), (x,), "relu")
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def tanh(x) -> Node:
    x = _node(x)
    val = np.tanh(x.value)
    out = Node(val, (x,), "tanh")
    out._backward = lambda g: x._accumulate(g * (1.0 - val**2))
    return out


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = Node(a.value @ b.value, (a, b), "matmul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    out._backward = backward
    return out


def affine(x, W, bias) -> Node:
    x, W, bias = _node(x), _node(W), _node(bias)
    if bias.shape != (1, W.shape[1]):
        raise ShapeError(f"affine: bias shape {bias.shape} != (1, {W.shape[1]})")
    return add(matmul(x, W), bias)


def transpose(x) -> Node:
    x = _node(x)
    out = Node(x.value.T, (x,), "transpose")
    out._backward = lambda g: x._accumulate(g.T)
    return out


def concat_cols(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    k = a.shape[1]
    out = Node(np.concatenate([a.value, b.value], axis=1), (a, b), "concat_cols")

    def backward(g):
        a._accumulate(g[:, :k])
        b._accumulate(g[:, k:])

    out._backward = backward
    return out


def concat_rows(nodes: Sequence[Node]) -> Node:
    nodes = [_node(n) for n in nodes]
    widths = {n.shape[1] for n in nodes}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ, {sorted(widths)}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])
    out = Node(np.concatenate([n.value for n in nodes], axis=0), nodes, "concat_rows")

    def backward(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            n._accumulate(g[lo:hi])

    out._backward = backward
    return out


def rows(x, start: int, stop: int) -> Node:
    x = _node(x)
    out = Node(x.value[start:stop], (x,), "rows")

    def backward(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        x._accumulate(full)

    out._backward = backward
    return out


def sum(x, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    x = _node(x)
    if axis is None:
        out = Node(x.value.sum(), (x,), "sum")
    else:
        out = Node(x.value.sum(axis=axis, keepdims=True), (x,), "sum")
    out._backward = lambda g: x._accumulate(np.broadcast_to(g, x.shape))
    return out


def mean(x, axis: int | None = None) -> Node:
    x = _node(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def detach(x) -> Node:
    return constant(_node(x).value)


def grad_reverse(x, lam: float = 1.0) -> Node:
    """Identity forward; backward multiplies the gradient by ``-lam``."""
    if lam < 0:
        raise ValueError("grad_reverse: lambda must be >= 0")
    x = _node(x)
    out = Node(x.value, (x,), "grad_reverse")
    out.value = x.value  # same buffer: forward is bit-identical
    out._backward = lambda g: x._accumulate(-lam * g)
    return out


# ---------------------------------------------------------------------------
# probability ops


def softmax_values(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits) -> Node:
    logits = _node(logits)
    p = softmax_values(logits.value)
    out = Node(p, (logits,), "softmax")

    def backward(g):
        logits._accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    out._backward = backward
    return out


def softmax_cross_entropy(logits, labels, weights=None) -> Node:
    """Mean over rows of ``-log softmax(logits)[label]``.

    With ``weights`` the mean is weighted: ``sum w_i ce_i / sum w_i``.
    """
    logits = _node(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    if weights is None:
        w = np.full(b, 1.0 / b)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != b or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be nonnegative, one per row, with positive sum")
        w = w / w.sum()
    logp = log_softmax_values(logits.value)
    idx = np.arange(b)
    out = Node(-(w * logp[idx, labels]).sum(), (logits,), "softmax_cross_entropy")

    def backward(g):
        d = np.exp(logp)
        d[idx, labels] -= 1.0
        logits._accumulate(g * d * w[:, None])

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Gradients of every reachable node are overwritten, so repeated calls on
    the same graph give identical results.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar root, got {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters and optimizers


class ParamStore:
    """Named parameter leaves plus Adam state."""

    def __init__(self):
        self.params: dict[str, Node] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}  # per-parameter Adam step counts
        self.step = 0

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = parameter(value)
        self.params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def fill_missing_grads(self) -> None:
        """Give parameters unreached by the last backward an explicit zero gradient."""
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.value)

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            v = _as_matrix(v)
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].value = v.copy()


def _grads(store: ParamStore, names: Iterable[str] | None) -> list[tuple[str, Node, np.ndarray]]:
    out = []
    for name in names if names is not None else store.params:
        p = store.params[name]
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        out.append((name, p, p.grad))
    return out


def sgd_step(store: ParamStore, lr: float, names: Iterable[str] | None = None) -> None:
    for _, p, g in _grads(store, names):
        p.value = p.value - lr * g
    store.step += 1


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
) -> None:
    store.step += 1
    for name, p, g in _grads(store, names):
        t = store.t.get(name, 0) + 1
        store.t[name] = t
        m = store.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            store.v[name] = np.zeros_like(g)
        v = store.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name], store.v[name] = m, v
        p.value = p.value - lr * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + eps)
