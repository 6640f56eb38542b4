"""Small reverse-mode differentiation core over float64 numpy arrays.

Only the primitives needed by the encoder, the MoE projector and the two
training losses are provided. Every primitive records a closure that
pushes the upstream gradient to its parents; :func:`backward` walks the
graph in reverse topological order.

Gradients accumulate on leaves across repeated :func:`backward` calls,
exactly like ``torch``; call :meth:`Node.zero_grad` to reset. Interior
nodes are recomputed from scratch on every call.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Node:
    """A value in a computation graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "op", "parents", "_backward", "requires_grad")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Sequence["Node"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on node of shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"


def as_node(x) -> Node:
    """Wrap arrays and scalars as constant leaves; pass nodes through."""
    return x if isinstance(x, Node) else Node(x)


def detach(x) -> Node:
    """Stop-gradient: a fresh constant leaf holding a copy of the value."""
    return Node(np.array(as_node(x).value, copy=True))


def _finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return value


def _make(value, op, parents, backward_fn) -> Node:
    return Node(_finite(value, op), op=op, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None
    # only a bias-style operand may be stretched; the main operand keeps its shape
    if out != a.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _make(a.value @ b.value, "matmul", (a, b), back)


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got {a.shape}")

    def back(g):
        a.grad += g.T

    return _make(a.value.T.copy(), "transpose", (a,), back)


def add(a, b) -> Node:
    """Elementwise sum; ``b`` may be a row/column vector broadcast over ``a``."""
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "add")

    def back(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _make(a.value + b.value, "add", (a, b), back)


def sub(a, b) -> Node:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Node:
    """Elementwise product with the same broadcasting rule as :func:`add`."""
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "mul")

    def back(g):
        if a.requires_grad:
            a.grad += g * b.value
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, "mul", (a, b), back)


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)

    def back(g):
        a.grad += c * g

    return _make(c * a.value, "scale", (a,), back)


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)

    def back(g):
        a.grad += g * out

    return _make(out, "exp", (a,), back)


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise ValueError("log of a non-positive value")

    def back(g):
        a.grad += g / a.value

    return _make(np.log(a.value), "log", (a,), back)


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0

    def back(g):
        a.grad += g * mask

    return _make(a.value * mask, "relu", (a,), back)


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries, or over ``axis`` keeping that axis with extent 1."""
    a = as_node(a)
    out = a.value.sum() if axis is None else a.value.sum(axis=axis, keepdims=True)

    def back(g):
        a.grad += np.broadcast_to(g, a.shape)

    return _make(np.asarray(out), "sum", (a,), back)


def mean(a) -> Node:
    a = as_node(a)
    n = a.value.size

    def back(g):
        a.grad += np.broadcast_to(g / n, a.shape)

    return _make(np.asarray(a.value.mean()), "mean", (a,), back)


def take_rows(a, index) -> Node:
    """Gather rows ``index`` of a matrix; repeated indices accumulate."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        np.add.at(a.grad, index, g)

    return _make(a.value[index], "take_rows", (a,), back)


def l2_normalize_rows(a) -> Node:
    """Rows divided by ``max(norm, 1e-12)``; zero rows stay zero."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ValueError(f"l2_normalize_rows expects a matrix, got {a.shape}")
    norms = np.sqrt((a.value**2).sum(axis=1, keepdims=True))
    floored = norms < NORM_FLOOR
    denom = np.where(floored, NORM_FLOOR, norms)
    out = a.value / denom

    def back(g):
        # on the floor the map is linear (x / 1e-12)
        proj = (g * out).sum(axis=1, keepdims=True)
        a.grad += np.where(floored, g / denom, (g - out * proj) / denom)

    return _make(out, "l2_normalize_rows", (a,), back)


def cosine_similarity_matrix(a, b) -> Node:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_similarity_matrix: shape mismatch {a.shape} vs {b.shape}")
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))


def softmax(logits, temperature: float = 1.0) -> Node:
    """Row-wise softmax of ``logits / temperature`` with max subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_node(logits)
    if z.value.ndim != 2:
        raise ValueError(f"softmax expects a matrix, got {z.shape}")
    shifted = z.value / temperature
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        z.grad += out * (g - inner) / temperature

    return _make(out, "softmax", (z,), back)


PRIMITIVES: dict[str, Callable[..., Node]] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "l2_normalize_rows": l2_normalize_rows,
    "cosine_similarity_matrix": cosine_similarity_matrix,
    "relu": relu,
    "softmax": softmax,
    "mul": mul,
    "transpose": transpose,
    "take_rows": take_rows,
}


def apply_primitive(op: str, *inputs, **attrs) -> Node:
    """Dispatch by tag; see :data:`PRIMITIVES` for the closed set."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------


def _topo_order(root: Node) -> list[Node]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every leaf reachable from ``root``."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.value)
    root_seed = np.ones_like(root.value)
    if root.is_leaf:
        root.grad += root_seed
        return
    root.grad = root_seed
    for node in reversed(order):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)


def grad_check(
    f: Callable[[Node], Node],
    point: np.ndarray,
    eps: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` and
    central finite differences at ``point``.

    ``f`` maps a leaf to a scalar node. The error of one coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    point = np.asarray(point, dtype=np.float64)
    leaf = Node(point.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad.ravel()

    flat = point.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = f(Node(bumped.reshape(point.shape))).item()
        bumped[i] = flat[i] - eps
        lo = f(Node(bumped.reshape(point.shape))).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        numeric = (hi - lo) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)
    return worst
