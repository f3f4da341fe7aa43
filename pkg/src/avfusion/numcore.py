"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
tape. Node ids grow monotonically, so ordering the reachable nodes by id is a
valid topological order and the backward pass simply replays them in reverse.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "ShapeError",
    "NumericalError",
    "GradcheckReport",
    "tensor",
    "zeros",
    "matmul",
    "add",
    "add_bias",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "concat_lastdim",
    "reshape",
    "transpose_last2",
    "softmax_rows",
    "sum_all",
    "elementwise",
    "backward",
    "record",
    "gradcheck",
    "gradcheck_params",
]


class ShapeError(ValueError):
    """Operand extents do not line up."""


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared in an input or result."""


_node_ids = itertools.count()


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return _wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(Graph.from_root(self), self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _wrap(arr: np.ndarray) -> Tensor:
    # Internal constructor: skips the copy, keeps the finiteness check.
    if not np.all(np.isfinite(arr)):
        raise NumericalError("operation produced NaN or Inf")
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t.node = None
    t.name = None
    return t


def record(kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap ``out`` and append a tape node if any input is tracked.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    result = _wrap(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(kind, inputs, result, backward_fn)
    return result


def _check_finite(*ts: Tensor) -> None:
    for t in ts:
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"non-finite input of shape {t.shape}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supports ``[m,k]@[k,n]``, ``[B,m,k]@[k,n]`` (shared right operand, as in a
    row-wise linear layer) and ``[B,m,k]@[B,k,n]``.
    """
    _check_finite(a, b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or (a.ndim == 2 and b.ndim == 3):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents differ {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if A.ndim == 3 and B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return record("matmul", A @ B, (a, b), back)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes differ {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x`` (the only broadcast we need)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match {x.shape}")

    def back(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return record("add_bias", x.data + b.data, (x, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return record("scale", x.data * f, (x,), lambda g: (g * f,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record("add_scalar", x.data + float(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def concat_lastdim(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat_lastdim needs at least one operand")
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim: leading shapes differ {lead} vs {t.shape[:-1]}")
    widths = [t.shape[-1] for t in xs]
    cuts = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=-1))

    return record("concat", np.concatenate([t.data for t in xs], axis=-1), tuple(xs), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("transpose_last2 needs rank >= 2")
    return record(
        "transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    _check_finite(m)
    if m.ndim < 1 or m.shape[-1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", p, (m,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "concat-lastdim": concat_lastdim,
    "scale": scale,
}


def elementwise(kind: str, *operands):
    """Dispatch by name, e.g. ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class Graph:
    """The ordered slice of the tape that a root depends on."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.id in seen:
                continue
            seen[n.id] = n
            for inp in n.inputs:
                if inp.node is not None and inp.node.id >= n.id:
                    raise RuntimeError("cycle detected in computation graph")
                stack.append(inp)
        return cls([seen[i] for i in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for n in self.nodes:
            for t in n.inputs:
                if t.node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def backward(graph: Graph, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Returns the gradients produced by this call, keyed by leaf tensor.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    if root.node is None:
        leaf_grads[id(root)] = (root, pending.pop(id(root)))
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            bucket = pending if inp.node is not None else None
            if bucket is None:
                prev = leaf_grads.get(id(inp))
                leaf_grads[id(inp)] = (inp, gi if prev is None else prev[1] + gi)
            else:
                prev = bucket.get(id(inp))
                bucket[id(inp)] = gi if prev is None else prev + gi
    result = {}
    for leaf, g in leaf_grads.values():
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    worst_param: str | None = None
    worst_index: tuple[int, ...] | None = None
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst_param}{list(self.worst_index or ())}" if self.worst_param else ""
        return f"{status} max_rel_err={self.max_rel_error:.3e}{where} ({self.checked} coords)"


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck_params(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
) -> GradcheckReport:
    """Central-difference check of every coordinate of every named parameter.

    ``fn`` is re-evaluated with parameter data perturbed in place, so it must
    read the parameters afresh on each call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params.values():
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"gradcheck: function output must be scalar, got {out.shape}")
    backward(Graph.from_root(out), out)
    report = GradcheckReport(max_rel_error=0.0, passed=True)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = _rel_err(a, numeric)
            report.checked += 1
            if err > report.max_rel_error or report.worst_param is None:
                report.max_rel_error = err
                report.worst_param = name
                report.worst_index = tuple(int(j) for j in np.unravel_index(i, p.shape))
                report.analytic, report.numeric = a, numeric
    report.passed = report.max_rel_error < tol
    return report


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, tol: float = 1e-5) -> GradcheckReport:
    """Check ``f``'s gradient at ``x`` against central finite differences."""
    x.requires_grad = True
    return gradcheck_params(lambda: f(x), {"x": x}, eps=eps, tol=tol)
