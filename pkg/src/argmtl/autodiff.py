"""Define-by-run reverse-mode differentiation over dense float64 matrices.

A :class:`Graph` is a tape: every op appends a :class:`Node` in creation
order, which is already a topological order. Values are computed lazily by
:func:`forward` and gradients by :func:`backward`.

All values are 2-D ``numpy`` arrays. ``add`` broadcasts a ``1 x n`` operand
over the rows of an ``m x n`` operand (bias rows, CRF score rows); the same
holds for the constant mask of ``mask``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "ShapeMismatchError",
    "NonFiniteError",
    "BackwardBeforeForwardError",
    "forward",
    "backward",
    "check_gradients",
    "numeric_gradients",
    "max_relative_error",
]


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardBeforeForwardError(RuntimeError):
    pass


class Node:
    __slots__ = ("op", "inputs", "value", "grad", "attr", "name", "index")

    def __init__(self, op, inputs, attr=None, value=None, name=None, index=0):
        self.op = op
        self.inputs = inputs
        self.attr = attr
        self.value = value
        self.grad = None
        self.name = name
        self.index = index

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        return f"Node({self.op!r}, #{self.index}, shape={self.shape})"


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got {a.ndim}-d array")
    return a


class Graph:
    """Tape of nodes. One graph per sequence; not shared between threads."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.evaluations = 0
        self._forward_done = False
        self._order = None

    def _push(self, op, inputs, attr=None, value=None, name=None) -> Node:
        node = Node(op, inputs, attr, value, name, len(self.nodes))
        self.nodes.append(node)
        return node

    # leaves
    def input(self, value, name=None) -> Node:
        return self._push("input", (), value=_as_matrix(value), name=name)

    def parameter(self, value, name=None) -> Node:
        """Wrap an existing array. The array is read, never copied or written."""
        if not isinstance(value, np.ndarray) or value.dtype != np.float64 or value.ndim != 2:
            value = _as_matrix(value)
        return self._push("parameter", (), value=value, name=name)

    @property
    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "parameter"]

    # ops
    def matmul(self, a: Node, b: Node) -> Node:
        return self._push("matmul", (a, b))

    def add(self, a: Node, b: Node) -> Node:
        return self._push("add", (a, b))

    def hadamard(self, a: Node, b: Node) -> Node:
        return self._push("hadamard", (a, b))

    def sigmoid(self, a: Node) -> Node:
        return self._push("sigmoid", (a,))

    def tanh(self, a: Node) -> Node:
        return self._push("tanh", (a,))

    def concat_cols(self, nodes: Sequence[Node]) -> Node:
        return self._push("concat_cols", tuple(nodes))

    def concat_rows(self, nodes: Sequence[Node]) -> Node:
        return self._push("concat_rows", tuple(nodes))

    def row_select(self, a: Node, rows) -> Node:
        if isinstance(rows, (int, np.integer)):
            if rows < 0:
                raise ShapeMismatchError(f"negative row index {rows}")
            return self._push("row_select", (a,), attr=slice(int(rows), int(rows) + 1))
        return self._push("row_select", (a,), attr=np.asarray(rows, dtype=np.intp))

    def col_slice(self, a: Node, start: int, stop: int) -> Node:
        return self._push("col_slice", (a,), attr=(int(start), int(stop)))

    def transpose(self, a: Node) -> Node:
        return self._push("transpose", (a,))

    def logsumexp_rows(self, a: Node) -> Node:
        """Per-row log-sum-exp; an ``m x n`` operand gives ``m x 1``."""
        return self._push("logsumexp_row", (a,))

    def scale(self, a: Node, factor: float) -> Node:
        return self._push("scale", (a,), attr=float(factor))

    def mask(self, a: Node, mask) -> Node:
        """Elementwise product with a constant (dropout masks, one-hot selectors)."""
        return self._push("mask", (a,), attr=_as_matrix(mask))

    def sum(self, a: Node) -> Node:
        return self._push("sum", (a,))


# forward rules ------------------------------------------------------------


def _fw_matmul(node, a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul {a.shape} @ {b.shape}")
    return a @ b


def _broadcastable(a, b):
    return a.shape == b.shape or (
        a.shape[1] == b.shape[1] and (a.shape[0] == 1 or b.shape[0] == 1)
    )


def _fw_add(node, a, b):
    if not _broadcastable(a, b):
        raise ShapeMismatchError(f"add {a.shape} + {b.shape}")
    return a + b


def _fw_hadamard(node, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"hadamard {a.shape} * {b.shape}")
    return a * b


def _fw_sigmoid(node, a):
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _fw_tanh(node, a):
    return np.tanh(a)


def _fw_concat_cols(node, *parts):
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeMismatchError("concat_cols needs equal row counts")
    return np.concatenate(parts, axis=1)


def _fw_concat_rows(node, *parts):
    if len({p.shape[1] for p in parts}) != 1:
        raise ShapeMismatchError("concat_rows needs equal column counts")
    return np.concatenate(parts, axis=0)


def _fw_row_select(node, a):
    rows = node.attr
    if isinstance(rows, slice):
        if rows.stop > a.shape[0]:
            raise ShapeMismatchError(f"row {rows.start} out of range for {a.shape}")
        return a[rows]
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise ShapeMismatchError(f"row index out of range for {a.shape}")
    return a[rows]


def _fw_col_slice(node, a):
    start, stop = node.attr
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeMismatchError(f"column slice {start}:{stop} of {a.shape}")
    return a[:, start:stop]


def _fw_transpose(node, a):
    return a.T.copy()


def _fw_logsumexp_row(node, a):
    m = a.max(axis=1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))


def _fw_scale(node, a):
    return node.attr * a


def _fw_mask(node, a):
    if not _broadcastable(a, node.attr) or node.attr.shape[0] > a.shape[0]:
        raise ShapeMismatchError(f"mask {node.attr.shape} on {a.shape}")
    return a * node.attr


def _fw_sum(node, a):
    return np.array([[a.sum()]])


# backward rules: (node, upstream grad, *input values) -> input grads ---------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def _bw_matmul(node, g, a, b):
    return g @ b.T, a.T @ g


def _bw_add(node, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_hadamard(node, g, a, b):
    return g * b, g * a


def _bw_sigmoid(node, g, a):
    s = node.value
    return (g * s * (1.0 - s),)


def _bw_tanh(node, g, a):
    t = node.value
    return (g * (1.0 - t * t),)


def _bw_concat_cols(node, g, *parts):
    out, col = [], 0
    for p in parts:
        w = p.shape[1]
        out.append(g[:, col : col + w])
        col += w
    return tuple(out)


def _bw_concat_rows(node, g, *parts):
    out, row = [], 0
    for p in parts:
        h = p.shape[0]
        out.append(g[row : row + h])
        row += h
    return tuple(out)


def _bw_row_select(node, g, a):
    da = np.zeros_like(a)
    _acc_row_select(node, da, g)
    return (da,)


def _bw_col_slice(node, g, a):
    da = np.zeros_like(a)
    _acc_col_slice(node, da, g)
    return (da,)


# in-place accumulators into an owned parent buffer
def _acc_row_select(node, buf, g):
    if isinstance(node.attr, slice):
        buf[node.attr] += g
    else:
        np.add.at(buf, node.attr, g)


def _acc_col_slice(node, buf, g):
    start, stop = node.attr
    buf[:, start:stop] += g


def _bw_transpose(node, g, a):
    return (g.T,)


def _bw_logsumexp_row(node, g, a):
    return (g * np.exp(a - node.value),)


def _bw_scale(node, g, a):
    return (node.attr * g,)


def _bw_mask(node, g, a):
    return (g * node.attr,)


def _bw_sum(node, g, a):
    return (np.full(a.shape, g[0, 0]),)


FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "hadamard": _fw_hadamard,
    "sigmoid": _fw_sigmoid,
    "tanh": _fw_tanh,
    "concat_cols": _fw_concat_cols,
    "concat_rows": _fw_concat_rows,
    "row_select": _fw_row_select,
    "col_slice": _fw_col_slice,
    "transpose": _fw_transpose,
    "logsumexp_row": _fw_logsumexp_row,
    "scale": _fw_scale,
    "mask": _fw_mask,
    "sum": _fw_sum,
}

ACCUMULATE: dict[str, Callable] = {
    "row_select": _acc_row_select,
    "col_slice": _acc_col_slice,
}

BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "hadamard": _bw_hadamard,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "concat_cols": _bw_concat_cols,
    "concat_rows": _bw_concat_rows,
    "row_select": _bw_row_select,
    "col_slice": _bw_col_slice,
    "transpose": _bw_transpose,
    "logsumexp_row": _bw_logsumexp_row,
    "scale": _bw_scale,
    "mask": _bw_mask,
    "sum": _bw_sum,
}


def _ancestors(graph: Graph, root: Node) -> list[Node]:
    """Nodes reachable from ``root``, in tape (topological) order."""
    seen = bytearray(len(graph.nodes))
    stack = [root]
    seen[root.index] = 1
    while stack:
        for parent in stack.pop().inputs:
            if not seen[parent.index]:
                seen[parent.index] = 1
                stack.append(parent)
    return [n for n in graph.nodes[: root.index + 1] if seen[n.index]]


def _run(graph: Graph, root: Node) -> list[Node]:
    # nodes are only ever appended, so a root's ancestor set never changes
    cached = graph._order
    order = cached[1] if cached is not None and cached[0] is root else _ancestors(graph, root)
    node = root
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            for node in order:
                inputs = node.inputs
                if not inputs:
                    if node.value is None:
                        raise ValueError(f"leaf {node!r} has no value")
                    continue
                fn = FORWARD[node.op]
                if len(inputs) == 1:
                    node.value = fn(node, inputs[0].value)
                elif len(inputs) == 2:
                    node.value = fn(node, inputs[0].value, inputs[1].value)
                else:
                    node.value = fn(node, *[p.value for p in inputs])
                graph.evaluations += 1
        except FloatingPointError as exc:
            raise NonFiniteError(f"non-finite value at {node!r}: {exc}") from None
    graph._order = (root, order)
    return order


def forward(graph: Graph, root: Node) -> float:
    """Evaluate every ancestor of ``root`` once, in topological order.

    The root must be ``1 x 1``; its value is returned as a float.
    """
    _run(graph, root)
    if not np.isfinite(root.value).all():
        raise NonFiniteError(f"non-finite root value at {root!r}")
    if root.value.shape != (1, 1):
        raise ShapeMismatchError(f"root must be 1x1, got {root.value.shape}")
    graph._forward_done = True
    return float(root.value[0, 0])


def evaluate(graph: Graph, root: Node) -> np.ndarray:
    """Like :func:`forward` for a root of any shape (inference)."""
    _run(graph, root)
    return root.value


def backward(graph: Graph, root: Node) -> None:
    """Populate ``grad`` on every parameter node of ``graph``.

    Parameters the root does not depend on get an all-zero gradient.
    """
    if not graph._forward_done or root.value is None:
        raise BackwardBeforeForwardError("run forward() before backward()")
    if root.value.shape != (1, 1):
        raise ShapeMismatchError("backward needs a scalar root")
    cached = graph._order
    order = cached[1] if cached is not None and cached[0] is root else _ancestors(graph, root)
    for node in graph.nodes:
        node.grad = None
    # buffers this pass allocated itself may be updated in place
    owned = bytearray(len(graph.nodes))
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        g = node.grad
        inputs = node.inputs
        if g is None or not inputs:
            continue
        acc = ACCUMULATE.get(node.op)
        if acc is not None:
            parent = inputs[0]
            if not owned[parent.index]:
                buf = np.zeros_like(parent.value)
                if parent.grad is not None:
                    buf += parent.grad
                parent.grad = buf
                owned[parent.index] = 1
            acc(node, parent.grad, g)
            continue
        grads = BACKWARD[node.op](node, g, *[p.value for p in inputs])
        for parent, pg in zip(inputs, grads):
            if parent.grad is None:
                parent.grad = pg
            elif owned[parent.index]:
                parent.grad += pg
            else:
                parent.grad = parent.grad + pg
                owned[parent.index] = 1
    for node in graph.nodes:
        if node.op == "parameter" and node.grad is None:
            node.grad = np.zeros_like(node.value)


# gradient checking ----------------------------------------------------------

LossBuilder = Callable[[Graph, Sequence[Node]], Node]


def analytic_gradients(builder: LossBuilder, params: Sequence[np.ndarray]) -> list[np.ndarray]:
    g = Graph()
    nodes = [g.parameter(p) for p in params]
    root = builder(g, nodes)
    forward(g, root)
    backward(g, root)
    return [n.grad.copy() for n in nodes]


def numeric_gradients(
    builder: LossBuilder, params: Sequence[np.ndarray], step: float = 1e-5
) -> list[np.ndarray]:
    """Central differences, one entry at a time.

    The tape is built once; each probe perturbs a leaf value in place and
    re-runs the forward pass. Values are restored afterwards.
    """
    g = Graph()
    nodes = [g.parameter(p) for p in params]
    root = builder(g, nodes)
    out = []
    for node in nodes:
        flat = node.value.reshape(-1)
        grad = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = forward(g, root)
            flat[i] = orig - step
            lo = forward(g, root)
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
        out.append(grad.reshape(node.value.shape))
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return worst


def check_gradients(builder: LossBuilder, params: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``builder(graph, param_nodes)`` must return a scalar node and be
    deterministic given the parameter values.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [p if p.dtype == np.float64 else p.astype(np.float64) for p in params]
    return max_relative_error(
        analytic_gradients(builder, params), numeric_gradients(builder, params, step)
    )
