"""A small reverse-mode gradient engine over dense float64 numpy arrays.

A `Graph` is a tape: every primitive appends one `Node` holding its value and a
closure that pushes the node's adjoint to its parents. Since nodes are appended
after their parents, reverse tape order is a valid reverse topological order.
Graphs are rebuilt every iteration and are single-threaded.
"""

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from strep.errors import NumericError, UsageError
from strep.geometry import rotation_jacobian, rotation_matrix

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

GRAD_FLOOR = 1e-2


class Node:
    __slots__ = ("value", "adjoint", "op_tag", "parents", "name", "trainable", "requires_grad", "_backward")

    def __init__(self, value: np.ndarray, op_tag: str, parents: tuple["Node", ...] = ()):
        self.value = value
        self.adjoint: Optional[np.ndarray] = None
        self.op_tag = op_tag
        self.parents = parents
        self.name: Optional[str] = None
        self.trainable = False
        self.requires_grad = any(parent.requires_grad for parent in parents)
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node({self.op_tag}{label}, shape={self.shape})"


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.adjoint is None:
        node.adjoint = np.array(grad, dtype=np.float64, copy=True).reshape(node.value.shape)
    else:
        node.adjoint += grad


class Graph:
    """Tape of one loss evaluation.

    `matmul_dtype` is the precision of the matrix products inside `linear`; node
    values, adjoints and every other op stay float64.
    """

    def __init__(self, matmul_dtype: Union[str, type] = np.float64):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.matmul_dtype = np.dtype(matmul_dtype)
        if self.matmul_dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise UsageError(f"matmul_dtype must be float32 or float64, got {self.matmul_dtype}")
        self._cast: dict[int, np.ndarray] = {}

    # --- leaves -------------------------------------------------------------

    def _record(
        self,
        value: np.ndarray,
        op_tag: str,
        parents: tuple[Node, ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
    ) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by '{op_tag}'", op=op_tag)
        node = Node(value, op_tag, parents)
        node._backward = backward
        self.nodes.append(node)
        return node

    def constant(self, value: ArrayLike) -> Node:
        return self._record(np.array(value, dtype=np.float64), "constant")

    def param(self, name: str, value: ArrayLike) -> Node:
        if name in self.params:
            raise UsageError(f"parameter '{name}' registered twice")
        node = self._record(np.array(value, dtype=np.float64), "param")
        node.name = name
        node.trainable = True
        node.requires_grad = True
        self.params[name] = node
        return node

    def _node(self, x: Union[Node, ArrayLike]) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    # --- primitives ---------------------------------------------------------

    def linear(self, w: Node, b: Node, x: Union[Node, ArrayLike]) -> Node:
        """x @ W + b with W of shape (in, out); x is (in,) or (n, in)."""
        x = self._node(x)
        if w.value.ndim != 2 or b.shape != (w.shape[1],) or x.value.ndim not in (1, 2):
            raise UsageError(f"linear: incompatible shapes W{w.shape} b{b.shape} x{x.shape}")
        if x.shape[-1] != w.shape[0]:
            raise UsageError(f"linear: input width {x.shape[-1]} does not match W{w.shape}")

        def backward(g: np.ndarray) -> None:
            if w.requires_grad:
                _accumulate(w, np.outer(x.value, g) if x.value.ndim == 1 else self._matmul(x.value.T, g))
            if b.requires_grad:
                _accumulate(b, g if g.ndim == 1 else g.sum(axis=0))
            if x.requires_grad:
                _accumulate(x, self._matmul(g, self._weight(w).T))

        return self._record(self._matmul(x.value, self._weight(w)) + b.value, "linear", (w, b, x), backward)

    def _weight(self, w: Node) -> np.ndarray:
        """`w` in matmul precision, converted once per graph."""
        if self.matmul_dtype == np.float64:
            return w.value
        if id(w) not in self._cast:
            self._cast[id(w)] = w.value.astype(self.matmul_dtype)
        return self._cast[id(w)]

    def _matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.matmul_dtype == np.float64:
            return a @ b
        dtype = self.matmul_dtype
        return (a.astype(dtype, copy=False) @ b.astype(dtype, copy=False)).astype(np.float64)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0.0

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * mask)

        return self._record(np.where(mask, x.value, 0.0), "relu", (x,), backward)

    def sin(self, x: Node) -> Node:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * np.cos(x.value))

        return self._record(np.sin(x.value), "sin", (x,), backward)

    def cos(self, x: Node) -> Node:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, -g * np.sin(x.value))

        return self._record(np.cos(x.value), "cos", (x,), backward)

    def concat(self, a: Union[Node, ArrayLike], b: Union[Node, ArrayLike]) -> Node:
        """Concatenate along the last axis.

        A vector concatenated to an (n, f) matrix is repeated on every row; this is
        the only expansion the engine performs.
        """
        a, b = self._node(a), self._node(b)
        if a.value.ndim == 1 and b.value.ndim == 1:
            value = np.concatenate([a.value, b.value])
            expand = False
        elif a.value.ndim == 2 and b.value.ndim == 2 and a.shape[0] == b.shape[0]:
            value = np.concatenate([a.value, b.value], axis=1)
            expand = False
        elif a.value.ndim == 2 and b.value.ndim == 1:
            value = np.concatenate([a.value, np.broadcast_to(b.value, (a.shape[0], b.shape[0]))], axis=1)
            expand = True
        else:
            raise UsageError(f"concat: incompatible shapes {a.shape} and {b.shape}")
        split = a.shape[-1]

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g[..., :split])
            gb = g[..., split:]
            _accumulate(b, gb.sum(axis=0) if expand else gb)

        return self._record(value, "concat", (a, b), backward)

    def max_over_points(self, x: Node) -> Node:
        """(n, f) -> (f,); the gradient goes to the lowest-index argmax of each column."""
        if x.value.ndim != 2:
            raise UsageError(f"max_over_points expects (n, f), got {x.shape}")
        idx = np.argmax(x.value, axis=0)
        cols = np.arange(x.shape[1])

        def backward(g: np.ndarray) -> None:
            grad = np.zeros_like(x.value)
            grad[idx, cols] = g
            _accumulate(x, grad)

        return self._record(x.value[idx, cols], "max_over_points", (x,), backward)

    def _same_shape(self, op: str, a: Node, b: Node) -> None:
        if a.shape != b.shape:
            raise UsageError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def add(self, a: Union[Node, ArrayLike], b: Union[Node, ArrayLike]) -> Node:
        a, b = self._node(a), self._node(b)
        self._same_shape("add", a, b)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(b, g)

        return self._record(a.value + b.value, "add", (a, b), backward)

    def sub(self, a: Union[Node, ArrayLike], b: Union[Node, ArrayLike]) -> Node:
        a, b = self._node(a), self._node(b)
        self._same_shape("sub", a, b)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(b, -g)

        return self._record(a.value - b.value, "sub", (a, b), backward)

    def mul(self, a: Union[Node, ArrayLike], b: Union[Node, ArrayLike]) -> Node:
        a, b = self._node(a), self._node(b)
        self._same_shape("mul", a, b)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g * b.value)
            _accumulate(b, g * a.value)

        return self._record(a.value * b.value, "mul", (a, b), backward)

    def scale(self, x: Node, factor: ArrayLike) -> Node:
        """Multiply by a constant (scalar, or a per-column vector for (n, f) inputs)."""
        factor = np.asarray(factor, dtype=np.float64)
        if factor.ndim > 1 or (factor.ndim == 1 and factor.shape[0] != x.shape[-1]):
            raise UsageError(f"scale: factor of shape {factor.shape} does not fit {x.shape}")

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * factor)

        return self._record(x.value * factor, "scale", (x,), backward)

    def square(self, x: Node) -> Node:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, 2.0 * g * x.value)

        return self._record(x.value * x.value, "square", (x,), backward)

    def sum(self, x: Node) -> Node:
        def backward(g: np.ndarray) -> None:
            _accumulate(x, np.full(x.shape, float(g)))

        return self._record(np.sum(x.value), "sum", (x,), backward)

    def mean(self, x: Node) -> Node:
        count = x.value.size

        def backward(g: np.ndarray) -> None:
            _accumulate(x, np.full(x.shape, float(g) / count))

        return self._record(np.mean(x.value), "mean", (x,), backward)

    def sigmoid_bce(self, logit: Node, label: ArrayLike) -> Node:
        """Elementwise binary cross entropy of sigmoid(logit) against 0/1 labels.

        Evaluated as max(x, 0) - x*y + log1p(exp(-|x|)); the sigmoid is never
        materialised before the log.
        """
        label = np.broadcast_to(np.asarray(label, dtype=np.float64), logit.shape)
        if not np.all((label == 0.0) | (label == 1.0)):
            raise UsageError("sigmoid_bce: labels must be 0 or 1")
        x = logit.value
        value = np.maximum(x, 0.0) - x * label + np.log1p(np.exp(-np.abs(x)))

        def backward(g: np.ndarray) -> None:
            # sigmoid written in the branch that cannot overflow
            e = np.exp(-np.abs(x))
            sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            _accumulate(logit, g * (sig - label))

        return self._record(value, "sigmoid_bce", (logit,), backward)

    def gather(self, x: Node, indices: Union[int, Sequence[int], np.ndarray]) -> Node:
        """Select entries (vectors) or rows (matrices) along axis 0."""
        index = np.asarray(indices, dtype=np.intp)
        if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
            raise UsageError(f"gather: index out of range for axis of length {x.shape[0]}")

        def backward(g: np.ndarray) -> None:
            grad = np.zeros_like(x.value)
            np.add.at(grad, index, g)
            _accumulate(x, grad)

        return self._record(x.value[index], "gather", (x,), backward)

    def rigid(self, translation: Node, angles: Node, points: Union[Node, ArrayLike]) -> Node:
        """Rigid transform of an (n, dim) point array: points @ R(angles).T + translation."""
        points = self._node(points)
        dim = translation.shape[0] if translation.value.ndim == 1 else -1
        if points.value.ndim != 2 or points.shape[1] != dim:
            raise UsageError(f"rigid: {translation.shape} translation cannot move points {points.shape}")
        rot = rotation_matrix(angles.value)
        if rot.shape[0] != dim:
            raise UsageError(f"rigid: {angles.shape} angles do not match a {dim}D translation")

        def backward(g: np.ndarray) -> None:
            _accumulate(translation, g.sum(axis=0))
            if points.requires_grad:
                _accumulate(points, g @ rot)
            if angles.requires_grad:
                d_rot = g.T @ points.value
                jac = rotation_jacobian(angles.value)
                _accumulate(angles, np.array([np.sum(d_rot * j) for j in jac]))

        return self._record(points.value @ rot.T + translation.value, "rigid", (translation, angles, points), backward)

    # --- reverse pass -------------------------------------------------------

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Adjoints of every registered parameter with respect to a scalar root."""
        if root.value.shape != ():
            raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
        for node in self.nodes:
            node.adjoint = None
        root.adjoint = np.array(1.0)
        position = {id(node): i for i, node in enumerate(self.nodes)}
        if id(root) not in position:
            raise UsageError("root does not belong to this graph")
        for node in reversed(self.nodes[: position[id(root)] + 1]):
            if node.requires_grad and node.adjoint is not None and node._backward is not None:
                node._backward(node.adjoint)
        return {
            name: (node.adjoint.copy() if node.adjoint is not None else np.zeros_like(node.value))
            for name, node in self.params.items()
        }


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1.0) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor)."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def error_floor(value: float) -> float:
    """Smallest gradient magnitude compared relatively when checking a function of size `value`.

    Finite differences carry rounding noise proportional to the function value, so
    the floor scales with it, up to 1; below the floor errors are measured absolutely.
    """
    return min(1.0, GRAD_FLOOR * max(1.0, abs(value)))


def grad_check(
    builder: Callable[[Graph, Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    tol: float = 1e-5,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central finite differences.

    `builder(graph, nodes)` must rebuild the same scalar from the registered
    parameter nodes. With `max_entries` only that many randomly chosen entries
    of each parameter are perturbed.
    """
    values = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    def evaluate(current: Mapping[str, np.ndarray]) -> tuple[Graph, Node]:
        graph = Graph()
        nodes = {name: graph.param(name, value) for name, value in current.items()}
        return graph, builder(graph, nodes)

    graph, root = evaluate(values)
    grads = graph.backward(root)
    floor = error_floor(float(root.value))

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, value in values.items():
        entries: Iterable[int] = range(value.size)
        if max_entries is not None and value.size > max_entries:
            entries = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        worst = 0.0
        for flat in entries:
            index = np.unravel_index(int(flat), value.shape)
            original = value[index]
            value[index] = original + h
            plus = float(evaluate(values)[1].value)
            value[index] = original - h
            minus = float(evaluate(values)[1].value)
            value[index] = original
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, float(relative_error(grads[name][index], numeric, floor)))
        report.max_rel_error[name] = worst
    return report
