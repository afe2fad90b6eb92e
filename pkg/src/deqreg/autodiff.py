"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: eager graphs, a fixed set of primitive
operations, and derivative rules that are themselves written in terms of
those primitives.  Because the rules emit ordinary graph operations,
``backward(..., create_graph=True)`` produces gradients that can be
differentiated again (reverse-over-reverse), which is what the
Jacobian-norm penalty needs.

Storage is row-major contiguous float64 with no views; copies are fine at
the problem sizes this library targets.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "enable_grad",
    "grad_enabled",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "relu",
    "tanh",
    "sin",
    "cos",
    "square",
    "scale",
    "tsum",
    "mean",
    "sum_rows",
    "tile_rows",
    "add_bias",
    "transpose",
    "backward",
    "finite_difference_grad",
    "graph_size",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names both shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces inf or NaN."""


# ---------------------------------------------------------------------------
# grad mode

_GRAD_ENABLED = [True]


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextlib.contextmanager
def enable_grad():
    """Re-enable graph recording (used while building gradient graphs)."""
    _GRAD_ENABLED.append(True)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


# ---------------------------------------------------------------------------
# tensor

class _Op:
    """Graph record: parent tensors plus one vjp rule per parent."""

    __slots__ = ("name", "parents", "vjps")

    def __init__(self, name: str, parents: tuple, vjps: tuple):
        self.name = name
        self.parents = parents
        self.vjps = vjps


class Tensor:
    """Dense float64 array, optionally carrying its derivation record.

    A leaf tensor (no record) is a plain value; a tensor produced by an
    operation remembers its parents and the local derivative rules, which
    is all ``backward`` needs.  Tensors are immutable after construction.
    """

    __slots__ = ("data", "requires_grad", "_op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._op: _Op | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Value-only copy, cut loose from any graph."""
        return Tensor(self.data.copy())

    def is_leaf(self) -> bool:
        return self._op is None

    def __repr__(self) -> str:
        tag = f", op={self._op.name}" if self._op is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(name: str, value: np.ndarray, parents: tuple, vjps: tuple) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{name} produced a non-finite value")
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=track)
    if track:
        out._op = _Op(name, parents, vjps)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# primitive operations
#
# Every vjp closure builds its result from the primitives below, so the
# gradient graph is itself differentiable.

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 (lambda g: g, lambda g: neg(g)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _make("neg", -a.data, (a,), (lambda g: neg(g),))


def mul(a, b) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    a, b = _lift(a), _lift(b)
    _check_same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 (lambda g: mul(g, b), lambda g: mul(g, a)))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    return _make("matmul", a.data @ b.data, (a, b),
                 (lambda g: matmul(g, transpose(b)),
                  lambda g: matmul(transpose(a), g)))


def relu(a) -> Tensor:
    a = _lift(a)
    # Subgradient at exactly 0 is 0; the mask is constant w.r.t. the graph.
    mask = Tensor((a.data > 0.0).astype(np.float64))
    return _make("relu", np.maximum(a.data, 0.0), (a,),
                 (lambda g: mul(g, mask),))


def tanh(a) -> Tensor:
    a = _lift(a)
    # the vjp reuses the output node, so d/da flows through square(out) too
    out = _make("tanh", np.tanh(a.data), (a,),
                (lambda g: mul(g, sub(Tensor(np.ones_like(out.data)), square(out))),))
    return out


def sin(a) -> Tensor:
    a = _lift(a)
    return _make("sin", np.sin(a.data), (a,), (lambda g: mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = _lift(a)
    return _make("cos", np.cos(a.data), (a,), (lambda g: mul(g, neg(sin(a))),))


def square(a) -> Tensor:
    a = _lift(a)
    return _make("square", a.data * a.data, (a,),
                 (lambda g: mul(g, scale(a, 2.0)),))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _lift(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), (lambda g: scale(g, c),))


def tsum(a) -> Tensor:
    """Sum of all elements, returning a 0-d tensor."""
    a = _lift(a)
    return _make("sum", np.asarray(a.data.sum()), (a,),
                 (lambda g: _expand(g, a.shape),))


def mean(a) -> Tensor:
    a = _lift(a)
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    return scale(tsum(a), 1.0 / a.size)


def _expand(s, shape: tuple) -> Tensor:
    """Broadcast a 0-d tensor to ``shape`` (adjoint of tsum)."""
    s = _lift(s)
    if s.ndim != 0:
        raise ShapeError(f"expand: expects a 0-d tensor, got shape {s.shape}")
    return _make("expand", np.full(shape, s.data.reshape(())), (s,),
                 (lambda g: tsum(g),))


def sum_rows(a) -> Tensor:
    """Column sums of a 2-D tensor: (n, k) -> (k,)."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"sum_rows: expects a 2-D tensor, got shape {a.shape}")
    n = a.shape[0]
    return _make("sum_rows", a.data.sum(axis=0), (a,),
                 (lambda g: tile_rows(g, n),))


def tile_rows(v, n: int) -> Tensor:
    """Stack a 1-D tensor as n identical rows: (k,) -> (n, k)."""
    v = _lift(v)
    if v.ndim != 1:
        raise ShapeError(f"tile_rows: expects a 1-D tensor, got shape {v.shape}")
    return _make("tile_rows", np.tile(v.data, (int(n), 1)), (v,),
                 (lambda g: sum_rows(g),))


def add_bias(m, b) -> Tensor:
    """Add a 1-D bias to every row of a 2-D tensor."""
    m, b = _lift(m), _lift(b)
    if m.ndim != 2 or b.ndim != 1 or m.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot broadcast bias {b.shape} over rows of {m.shape}")
    return _make("add_bias", m.data + b.data[None, :], (m, b),
                 (lambda g: g, lambda g: sum_rows(g)))


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,),
                 (lambda g: transpose(g),))


# ---------------------------------------------------------------------------
# backward

def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the op graph (children after parents)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for p in node._op.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor, seed=None, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Reverse-mode sweep from ``root``; returns gradients for leaf tensors.

    ``seed`` defaults to ones and must match the root's shape (for a scalar
    root it can be omitted).  Gradients of shared subexpressions accumulate.
    With ``create_graph=True`` the returned gradients are graph tensors and
    can themselves be differentiated.
    """
    if seed is None:
        if root.size != 1:
            raise ShapeError(f"backward: non-scalar root of shape {root.shape} needs a seed")
        seed = np.ones(root.shape)
    seed_t = _lift(seed)
    if seed_t.shape != root.shape:
        raise ShapeError(f"backward: seed shape {seed_t.shape} does not match root shape {root.shape}")

    order = _topo_order(root)
    grads: dict[int, Tensor] = {id(root): seed_t}
    by_id: dict[int, Tensor] = {id(t): t for t in order}

    mode = enable_grad if create_graph else no_grad
    with mode():
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._op is None:
                continue
            for parent, vjp in zip(node._op.parents, node._op.vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)

    return {
        by_id[i]: g
        for i, g in grads.items()
        if by_id[i]._op is None and by_id[i].requires_grad
    }


def graph_size(root: Tensor) -> int:
    """Number of tensors reachable through the op graph (root included)."""
    return len(_topo_order(root))


# ---------------------------------------------------------------------------
# finite differences (test oracle)

def finite_difference_grad(fn: Callable[[np.ndarray], float], at, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if step <= 0:
        raise ValueError(f"finite_difference_grad: step must be positive, got {step}")
    at = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64, copy=True)
    grad = np.zeros_like(at)
    flat = at.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(at))
        flat[i] = orig - step
        lo = float(fn(at))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"finite_difference_grad: fn non-finite at coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad
