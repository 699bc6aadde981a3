"""Dense 2-D float64 matrices with reverse-mode automatic differentiation.

The compute core is deliberately small: matrices are immutable after
construction, every differentiable operation appends one node to an acyclic
graph, and ``backward`` runs a reverse sweep in creation order. The primitive
set is exactly what the screening, fusion and classifier stacks need, which
keeps every gradient rule short enough to check by hand and by finite
differences.
"""

from __future__ import annotations

import itertools
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Matrix",
    "Node",
    "constant",
    "param",
    "matmul",
    "transpose",
    "softmax_rows",
    "sigmoid",
    "relu",
    "tanh",
    "mul",
    "add",
    "scale",
    "mean_rows",
    "row_sums",
    "concat_cols",
    "reshape",
    "repeat_rows",
    "affine",
    "cross_entropy",
    "elementwise",
    "backward",
    "grad_check",
]


class Matrix:
    """Immutable row-major float64 matrix with at least one row and column.

    Construction rejects NaN and infinity so that non-finite values can only
    arise from arithmetic, where the training loop checks for them loudly.
    """

    __slots__ = ("data",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"matrix must be 2-D, got {arr.ndim}-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"matrix needs at least one row and column, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError("matrix entries must be finite")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Matrix":
        # Internal fast path: arr is a fresh float64 result of a checked op.
        m = object.__new__(cls)
        m.data = arr
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.ones((rows, cols)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def at(self, i: int, j: int) -> float:
        return float(self.data[i, j])

    def tolist(self) -> list[list[float]]:
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


class Node:
    """One vertex of the compute graph: a value plus how it was produced."""

    __slots__ = ("value", "op", "parents", "aux", "grad", "requires", "order")

    _counter = itertools.count()

    def __init__(self, value: Matrix, op: str, parents: tuple["Node", ...], aux, requires: bool) -> None:
        self.value = value
        self.op = op
        self.parents = parents
        self.aux = aux
        self.grad: np.ndarray | None = None
        self.requires = requires
        self.order = next(Node._counter)

    def __repr__(self) -> str:
        return f"Node({self.op}, {self.value.rows}x{self.value.cols})"


def constant(m: Matrix) -> Node:
    """Leaf that never receives a gradient (inputs, fixed encodings)."""
    return Node(m, "const", (), None, False)


def param(m: Matrix) -> Node:
    """Trainable leaf; ``backward`` populates and reports its gradient."""
    return Node(m, "param", (), None, True)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Matrix):
        return constant(x)
    raise TypeError(f"expected Matrix or Node, got {type(x).__name__}")


def _make(value: np.ndarray, op: str, parents: tuple[Node, ...], aux=None) -> Node:
    requires = any(p.requires for p in parents)
    return Node(Matrix._wrap(value), op, parents, aux, requires)


# --- primitives -----------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.cols != b.value.rows:
        raise DimensionError(f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    return _make(a.value.data @ b.value.data, "matmul", (a, b))


def transpose(a) -> Node:
    a = _as_node(a)
    return _make(np.ascontiguousarray(a.value.data.T), "transpose", (a,))


def softmax_rows(a) -> Node:
    """Row-wise softmax with max subtraction; each output row sums to 1."""
    a = _as_node(a)
    z = a.value.data
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return _make(y, "softmax_rows", (a,))


def sigmoid(a) -> Node:
    a = _as_node(a)
    z = a.value.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _make(y, "sigmoid", (a,))


def relu(a) -> Node:
    a = _as_node(a)
    z = a.value.data
    return _make(np.maximum(z, 0.0), "relu", (a,), aux=z > 0)


def tanh(a) -> Node:
    a = _as_node(a)
    return _make(np.tanh(a.value.data), "tanh", (a,))


def _binary_shapes(a: Node, b: Node, op: str) -> str:
    """Classify a binary op as equal-shape or the declared N x 1 broadcast."""
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return "equal"
    if sb == (sa[0], 1):
        return "bcast_b"
    if sa == (sb[0], 1):
        return "bcast_a"
    raise DimensionError(f"{op} needs equal shapes or an Nx1 column against NxL, got {sa} and {sb}")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    mode = _binary_shapes(a, b, "mul")
    return _make(a.value.data * b.value.data, "mul", (a, b), aux=mode)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    mode = _binary_shapes(a, b, "add")
    return _make(a.value.data + b.value.data, "add", (a, b), aux=mode)


def scale(a, k: float) -> Node:
    a = _as_node(a)
    return _make(a.value.data * float(k), "scale", (a,), aux=float(k))


def mean_rows(a) -> Node:
    """Column means: an N x C input becomes the 1 x C row of per-column means."""
    a = _as_node(a)
    return _make(a.value.data.mean(axis=0, keepdims=True), "mean_rows", (a,))


def row_sums(a) -> Node:
    """Sum within each row: N x C in, N x 1 out."""
    a = _as_node(a)
    return _make(a.value.data.sum(axis=1, keepdims=True), "row_sums", (a,))


def concat_cols(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.rows != b.value.rows:
        raise DimensionError(f"concat_cols row mismatch: {a.value.shape} vs {b.value.shape}")
    joined = np.concatenate([a.value.data, b.value.data], axis=1)
    return _make(joined, "concat_cols", (a, b), aux=a.value.cols)


def reshape(a, rows: int, cols: int) -> Node:
    a = _as_node(a)
    if rows * cols != a.value.rows * a.value.cols:
        raise DimensionError(f"cannot reshape {a.value.shape} to ({rows}, {cols})")
    if rows < 1 or cols < 1:
        raise DimensionError("reshape target needs at least one row and column")
    return _make(a.value.data.reshape(rows, cols).copy(), "reshape", (a,))


def repeat_rows(a, n: int) -> Node:
    """Tile a 1 x C row vector into n identical rows."""
    a = _as_node(a)
    if a.value.rows != 1:
        raise DimensionError(f"repeat_rows expects a single row, got {a.value.shape}")
    if n < 1:
        raise DimensionError("repeat_rows needs n >= 1")
    return _make(np.repeat(a.value.data, n, axis=0), "repeat_rows", (a,))


def affine(x, w, b) -> Node:
    """x @ w + b with a 1 x C bias row broadcast over the rows of x @ w."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    if x.value.cols != w.value.rows:
        raise DimensionError(f"affine shape mismatch: {x.value.shape} x {w.value.shape}")
    if b.value.shape != (1, w.value.cols):
        raise DimensionError(f"affine bias must be 1x{w.value.cols}, got {b.value.shape}")
    return _make(x.value.data @ w.value.data + b.value.data, "affine", (x, w, b))


def cross_entropy(logits, label: int) -> Node:
    """Negative log-softmax of the true class, computed in log space."""
    logits = _as_node(logits)
    if logits.value.rows != 1:
        raise ContractError(f"cross_entropy expects a single logit row, got {logits.value.shape}")
    k = logits.value.cols
    if not 0 <= label < k:
        raise ContractError(f"label {label} out of range for {k} classes")
    z = logits.value.data[0]
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    loss = np.array([[lse - z[label]]])
    p = np.exp(z - lse)
    return _make(loss, "cross_entropy", (logits,), aux=(p, label))


_ELEMENTWISE: dict[str, Callable] = {
    "sigmoid": sigmoid,
    "relu": relu,
    "mul": mul,
    "add": add,
    "scale": scale,
}


def elementwise(kind: str, *operands) -> Node:
    """Dispatch to a pointwise primitive by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# --- backward sweep -------------------------------------------------------


def _acc(p: Node, g: np.ndarray) -> None:
    if not p.requires:
        return
    if p.grad is None:
        p.grad = np.array(g, dtype=np.float64)
    else:
        p.grad += g


def _vjp_matmul(n: Node) -> None:
    g = n.grad
    a, b = n.parents
    if a.requires:
        _acc(a, g @ b.value.data.T)
    if b.requires:
        _acc(b, a.value.data.T @ g)


def _vjp_transpose(n: Node) -> None:
    _acc(n.parents[0], n.grad.T)


def _vjp_softmax_rows(n: Node) -> None:
    y = n.value.data
    g = n.grad
    _acc(n.parents[0], y * (g - (g * y).sum(axis=1, keepdims=True)))


def _vjp_sigmoid(n: Node) -> None:
    y = n.value.data
    _acc(n.parents[0], n.grad * y * (1.0 - y))


def _vjp_relu(n: Node) -> None:
    _acc(n.parents[0], n.grad * n.aux)


def _vjp_tanh(n: Node) -> None:
    y = n.value.data
    _acc(n.parents[0], n.grad * (1.0 - y * y))


def _vjp_mul(n: Node) -> None:
    g = n.grad
    a, b = n.parents
    mode = n.aux
    if a.requires:
        ga = g * b.value.data
        _acc(a, ga.sum(axis=1, keepdims=True) if mode == "bcast_a" else ga)
    if b.requires:
        gb = g * a.value.data
        _acc(b, gb.sum(axis=1, keepdims=True) if mode == "bcast_b" else gb)


def _vjp_add(n: Node) -> None:
    g = n.grad
    a, b = n.parents
    mode = n.aux
    if a.requires:
        _acc(a, g.sum(axis=1, keepdims=True) if mode == "bcast_a" else g)
    if b.requires:
        _acc(b, g.sum(axis=1, keepdims=True) if mode == "bcast_b" else g)


def _vjp_scale(n: Node) -> None:
    _acc(n.parents[0], n.grad * n.aux)


def _vjp_mean_rows(n: Node) -> None:
    a = n.parents[0]
    _acc(a, np.broadcast_to(n.grad / a.value.rows, a.value.shape))


def _vjp_row_sums(n: Node) -> None:
    a = n.parents[0]
    _acc(a, np.broadcast_to(n.grad, a.value.shape))


def _vjp_concat_cols(n: Node) -> None:
    g = n.grad
    a, b = n.parents
    split = n.aux
    if a.requires:
        _acc(a, g[:, :split])
    if b.requires:
        _acc(b, g[:, split:])


def _vjp_reshape(n: Node) -> None:
    a = n.parents[0]
    _acc(a, n.grad.reshape(a.value.shape))


def _vjp_repeat_rows(n: Node) -> None:
    _acc(n.parents[0], n.grad.sum(axis=0, keepdims=True))


def _vjp_affine(n: Node) -> None:
    g = n.grad
    x, w, b = n.parents
    if x.requires:
        _acc(x, g @ w.value.data.T)
    if w.requires:
        _acc(w, x.value.data.T @ g)
    if b.requires:
        _acc(b, g.sum(axis=0, keepdims=True))


def _vjp_cross_entropy(n: Node) -> None:
    p, label = n.aux
    g = p.copy()
    g[label] -= 1.0
    _acc(n.parents[0], n.grad[0, 0] * g.reshape(1, -1))


# Patchable on purpose: fault-injection tests corrupt single rules to verify
# that the finite-difference check actually catches wrong gradients.
VJP_RULES: dict[str, Callable[[Node], None]] = {
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "softmax_rows": _vjp_softmax_rows,
    "sigmoid": _vjp_sigmoid,
    "relu": _vjp_relu,
    "tanh": _vjp_tanh,
    "mul": _vjp_mul,
    "add": _vjp_add,
    "scale": _vjp_scale,
    "mean_rows": _vjp_mean_rows,
    "row_sums": _vjp_row_sums,
    "concat_cols": _vjp_concat_cols,
    "reshape": _vjp_reshape,
    "repeat_rows": _vjp_repeat_rows,
    "affine": _vjp_affine,
    "cross_entropy": _vjp_cross_entropy,
}


def backward(root: Node) -> dict[Node, Matrix]:
    """Reverse sweep from a scalar root; returns gradients of reached params.

    Nodes are visited in reverse creation order, which is a valid topological
    order because parents always precede children. Leaves that no trainable
    parameter feeds into are skipped entirely.
    """
    if root.value.shape != (1, 1):
        raise ContractError(f"backward root must be 1x1, got {root.value.shape}")

    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        stack.extend(n.parents)
    nodes.sort(key=lambda n: n.order, reverse=True)

    root.grad = np.ones((1, 1))
    grads: dict[Node, Matrix] = {}
    for n in nodes:
        if n.grad is None or not n.requires:
            continue
        if n.op == "param":
            grads[n] = Matrix._wrap(n.grad)
            continue
        VJP_RULES[n.op](n)
    return grads


def grad_check(
    build_loss: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, Matrix],
    step: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``build_loss`` must be a pure function of the parameter nodes it is given;
    it is re-invoked twice per scalar parameter with the entry nudged by
    ``step``. The error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")

    leaves = {name: param(m) for name, m in params.items()}
    root = build_loss(leaves)
    if root.value.shape != (1, 1):
        raise ContractError("loss builder must produce a 1x1 scalar")
    if not np.isfinite(root.value.data[0, 0]):
        raise NumericalError("loss is non-finite at the evaluation point")
    backward(root)

    def loss_at(perturbed: Mapping[str, Matrix], name: str) -> float:
        consts = {k: constant(v) for k, v in perturbed.items()}
        val = build_loss(consts).value.data[0, 0]
        if not np.isfinite(val):
            raise NumericalError(f"loss is non-finite while perturbing {name!r}")
        return float(val)

    worst = 0.0
    work = {name: m for name, m in params.items()}
    for name in sorted(params):
        base = params[name].data
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            saved = base[idx]
            bumped = base.copy()
            bumped[idx] = saved + step
            work[name] = Matrix._wrap(bumped)
            up = loss_at(work, name)
            bumped = base.copy()
            bumped[idx] = saved - step
            work[name] = Matrix._wrap(bumped)
            down = loss_at(work, name)
            work[name] = params[name]
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
