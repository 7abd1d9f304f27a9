"""Dense reverse-mode autodiff over numpy arrays, plus Adagrad.

Every op accepts and returns :class:`Node` objects. Values keep the dtype of
their inputs, so the same graph code runs in float32 for training and in
float64 for finite-difference checks.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_NORM = 1e-12
EPS_PROB = 1e-7
DTYPE = np.float32


class ShapeError(ValueError):
    """Operand dims are incompatible for an op."""

    def __init__(self, op: str, *dims: Sequence[int]):
        self.op = op
        self.dims = [list(d) for d in dims]
        joined = " vs ".join(str(d) for d in self.dims)
        super().__init__(f"{op}: incompatible dims {joined}")


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; after
    :func:`backward` their ``grad`` holds d(loss)/d(value).
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents: tuple = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, as_node(other, self.value.dtype))

    def __radd__(self, other):
        return add(as_node(other, self.value.dtype), self)

    def __sub__(self, other):
        return sub(self, as_node(other, self.value.dtype))

    def __rsub__(self, other):
        return sub(as_node(other, self.value.dtype), self)

    def __mul__(self, other):
        return mul(self, as_node(other, self.value.dtype))

    def __rmul__(self, other):
        return mul(as_node(other, self.value.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, as_node(-1.0, self.value.dtype))


def param(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def const(value, dtype=None) -> Node:
    arr = np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype)
    return Node(arr)


def as_node(x, dtype=DTYPE) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ---------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape("subtract", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, (a, b), bw)


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape("multiply", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return Node(a.value * b.value, (a, b), bw)


def scale(x: Node, c: float) -> Node:
    """Multiply by a constant scalar."""
    c = np.asarray(c, dtype=x.value.dtype)

    def bw(g):
        return (g * c,)

    return Node(x.value * c, (x,), bw)


def bias_add(x: Node, b: Node) -> Node:
    """Add a scalar (shape () or (1,)) bias to every element of ``x``."""
    if b.value.size != 1:
        raise ShapeError("bias_add", x.shape, b.shape)

    def bw(g):
        return g, np.asarray(g.sum()).reshape(b.shape)

    return Node(x.value + b.value.reshape(()), (x, b), bw)


def relu(x: Node) -> Node:
    on = x.value > 0

    def bw(g):
        return (g * on,)

    return Node(np.where(on, x.value, 0).astype(x.value.dtype), (x,), bw)


def sigmoid(x: Node) -> Node:
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)

    def bw(g):
        return (g * out * (1 - out),)

    return Node(out, (x,), bw)


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)

    def bw(g):
        return (g * (1 - out * out),)

    return Node(out, (x,), bw)


# -- linear algebra / structure -----------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` with numpy semantics, including batched leading dims."""
    if a.value.ndim == 0 or b.value.ndim == 0 or a.shape[-1] != (b.shape[-2] if b.value.ndim > 1 else b.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape)
    if b.value.ndim == 2 and a.value.ndim > 2:
        out = (a.value.reshape(-1, a.shape[-1]) @ b.value).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = np.matmul(a.value, b.value)

    def bw(g):
        av, bv = a.value, b.value
        if not a.requires_grad and bv.ndim == 2 and av.ndim >= 2:
            return None, av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = np.tensordot(g, av, axes=(tuple(range(g.ndim)), tuple(range(av.ndim - 1))))
            return _unbroadcast(ga, a.shape), gb
        if av.ndim == 1:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            gb = av[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bv.ndim == 2 and av.ndim > 2:
            # shared weight: fold the batch dims instead of summing a stack
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bv.T).reshape(av.shape)
            gb = av.reshape(-1, av.shape[-1]).T @ g2
            return ga, gb
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out, (a, b), bw)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    shapes = [n.shape for n in nodes]
    ndim = len(shapes[0])
    ax = axis % ndim if ndim else 0
    for s in shapes[1:]:
        if len(s) != ndim or any(s[i] != shapes[0][i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", *shapes)
    sizes = np.cumsum([s[ax] for s in shapes])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Node(np.concatenate([n.value for n in nodes], axis=ax), tuple(nodes), bw)


def reshape(x: Node, shape: tuple) -> Node:
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def bw(g):
        return (g.reshape(x.shape),)

    return Node(out, (x,), bw)


def transpose(x: Node, axes: tuple) -> Node:
    inverse = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return Node(np.transpose(x.value, axes), (x,), bw)


def mean_rows(x: Node, axis: int = 0) -> Node:
    """Mean over ``axis`` (rows by default): [[2,4],[4,8]] -> [3,6]."""
    n = x.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return Node(x.value.mean(axis=axis), (x,), bw)


def sum_(x: Node, axis=None, keepdims: bool = False) -> Node:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.value.dtype),)

    return Node(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def softmax(x: Node, mask: np.ndarray | None = None, axis: int = -1) -> Node:
    """Softmax along ``axis``; positions where ``mask`` is False get -inf.

    A slice with every position masked yields all zeros instead of NaN.
    """
    v = x.value
    if mask is not None:
        mask = np.broadcast_to(mask, v.shape)
        v = np.where(mask, v, -np.inf)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (e / np.where(s > 0, s, 1)).astype(x.value.dtype)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Node(out, (x,), bw)


def gather_rows(table: Node, idx: np.ndarray) -> Node:
    """Embedding lookup: ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx.max() if idx.max() >= n else idx.min())
        raise IndexError(f"embedding index {bad} out of range for table with {n} rows")

    def bw(g):
        flat = g.reshape(-1, table.shape[1])
        out = np.zeros_like(table.value)
        np.add.at(out, idx.reshape(-1), flat)
        return (out,)

    return Node(table.value[idx], (table,), bw)


def stop_gradient(x: Node) -> Node:
    """Same value, cut from the graph: nothing flows back into ``x``."""
    return Node(x.value)


def l2_normalize(x: Node, axis: int = -1, eps: float = EPS_NORM) -> Node:
    """``x / max(||x||, eps)`` along ``axis``; zero vectors map to zeros."""
    if x.shape[axis] < 1:
        raise ShapeError("l2_normalize", x.shape)
    v = x.value
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm).astype(v.dtype)
    out = v / denom

    def bw(g):
        # below the floor the op is a constant scaling
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - out * proj) / denom),)

    return Node(out, (x,), bw)


def logloss(p: Node, y, eps: float = EPS_PROB) -> Node:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``."""
    y = np.asarray(y, dtype=p.value.dtype)
    if y.shape != p.shape:
        raise ShapeError("logloss", p.shape, y.shape)
    pc = np.clip(p.value, eps, 1 - eps)
    n = max(p.value.size, 1)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / n
    inside = (p.value >= eps) & (p.value <= 1 - eps)

    def bw(g):
        d = (-(y / pc) + (1 - y) / (1 - pc)) / n
        return ((g * d * inside).astype(p.value.dtype),)

    return Node(np.asarray(loss, dtype=p.value.dtype), (p,), bw)


def logloss_value(p: np.ndarray, y: np.ndarray, eps: float = EPS_PROB) -> float:
    pc = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean())


# -- backward ------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node reachable from scalar ``loss``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got dims {list(loss.shape)}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.value.dtype)
            parent.grad = g if parent.grad is None else parent.grad + g


# -- gradient check --------------------------------------------------------------

def grad_check(f: Callable[[list[Node]], Node], params: Sequence[np.ndarray],
               step: float = 1e-3, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` builds a scalar loss from parameter nodes. Both the analytic and
    the finite-difference paths run in float64. With ``max_coords`` set,
    each parameter array is probed at that many seeded random coordinates.
    """
    base = [np.array(p, dtype=np.float64) for p in params]
    nodes = [param(b.copy()) for b in base]
    backward(f(nodes))
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, arr in enumerate(base):
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        for c in coords:
            def at(delta):
                shifted = [b.copy() for b in base]
                shifted[k].reshape(-1)[c] += delta
                return float(f([const(s) for s in shifted]).value)
            cd = (at(step) - at(-step)) / (2 * step)
            a = float(analytic[k].reshape(-1)[c])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst


# -- optimizer / init ---------------------------------------------------------

@dataclass
class AdagradState:
    learning_rate: float = 0.01
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)


def adagrad_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 state: AdagradState) -> None:
    """In-place update: ``acc += g**2; p -= lr * g / (sqrt(acc) + eps)``."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adagrad_step[{name}]", p.shape, g.shape)
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p)
        elif acc.shape != p.shape:
            raise ShapeError(f"adagrad_step[{name}]", p.shape, acc.shape)
        g = g.astype(p.dtype, copy=False)
        acc += g * g
        p -= (state.learning_rate * g / (np.sqrt(acc) + state.epsilon)).astype(p.dtype)


def derive_seed(seed: int, component: str) -> int:
    """Child seed = first 8 bytes (LE) of sha256("<seed>/<component>")."""
    digest = hashlib.sha256(f"{int(seed)}/{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, component))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def embedding_init(rng: np.random.Generator, rows: int, dim: int, dtype=DTYPE) -> np.ndarray:
    return rng.uniform(-0.01, 0.01, size=(rows, dim)).astype(dtype)


def collect_grads(nodes: dict[str, Node]) -> dict[str, np.ndarray]:
    return {k: n.grad for k, n in nodes.items() if n.grad is not None}


def parameters(arrays: dict[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Node]:
    keys = arrays.keys() if names is None else names
    return {k: param(arrays[k], name=k) for k in keys}
