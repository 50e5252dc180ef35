"""Reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are define-by-run: every primitive applied to a tensor that requires
grad records a node holding its parents and a backward rule. ``backward``
orders the reachable nodes by creation id (a valid topological order),
propagates adjoints once per node and then releases the graph.

GELU uses the tanh approximation in both directions. Top-k ties resolve to
the lowest index.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "NumericError",
    "Tensor",
    "Tape",
    "apply_primitive",
    "backward",
    "finite_difference_grad",
    "no_grad",
    "debug_mode",
    "tensor",
    "zeros",
    "concat",
    "topk",
]


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shapes, ranges, state)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


_ids = itertools.count()
_grad_enabled = True
_debug = False


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every primitive's output for NaN/Inf while active."""
    global _debug
    prev, _debug = _debug, enabled
    try:
        yield
    finally:
        _debug = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    parents: tuple["Tensor", ...]
    rule: BackwardFn | None
    consumed: bool = False


class Tensor:
    """A float64 array with an optional gradient and a link to its producing node."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "aux")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name
        self.aux = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.node = None
        t.name = None
        t.aux = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> list[float]:
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.id

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", [self, _lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("sub", [self, _lift(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [_lift(other), self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, _lift(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply_primitive("div", [self, _lift(other)])

    def __neg__(self):
        return apply_primitive("neg", [self])

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return apply_primitive("gather", [self], key=key)

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)

    def transpose(self, *axes):
        return apply_primitive("transpose", [self], axes=axes or None)

    def relu(self):
        return apply_primitive("relu", [self])

    def gelu(self):
        return apply_primitive("gelu", [self])

    def sigmoid(self):
        return apply_primitive("sigmoid", [self])

    def exp(self):
        return apply_primitive("exp", [self])

    def log(self):
        return apply_primitive("log", [self])

    def softmax(self):
        return apply_primitive("softmax", [self])

    def log_softmax(self):
        return apply_primitive("log_softmax", [self])

    def layer_norm(self, eps: float = 1e-8):
        return apply_primitive("layer_norm", [self], eps=eps)

    def masked_fill(self, mask, value: float):
        return apply_primitive("masked_fill", [self], mask=np.asarray(mask, dtype=bool), value=value)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitive rules: each returns (output array, backward rule)
# ---------------------------------------------------------------------------

def _add(a, b):
    _broadcast_check("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast_check("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast_check("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(a, b):
    _broadcast_check("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _neg(a):
    return -a, lambda g: (-g,)


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not contract")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not contract") from None

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, rule


def _relu(a):
    on = a > 0
    return np.where(on, a, 0.0), lambda g: (g * on,)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(a):
    sq = a * a
    t = np.tanh(_GELU_C * (a + 0.044715 * sq * a))
    out = 0.5 * a * (1.0 + t)

    def rule(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)

    return out, rule


def _sigmoid(a):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(a))
    out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out, lambda g: (g * out * (1.0 - out),)


def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(a):
    if np.any(a <= 0):
        raise NumericError("log: non-positive input")
    return np.log(a), lambda g: (g / a,)


def _softmax(a):
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return out, rule


def _sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, rule


def _mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1) if axis is not None else a.size

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, rule


def _gather(a, key):
    try:
        out = a[key]
    except IndexError as exc:
        raise ContractViolation(f"gather: {exc} for shape {a.shape}") from None
    out = np.array(out, dtype=np.float64)

    def rule(g):
        full = np.zeros_like(a)
        np.add.at(full, key, g)
        return (full,)

    return out, rule


def _scatter_rows(a, rows, n):
    rows = np.asarray(rows, dtype=np.intp)
    if rows.shape != a.shape[:1]:
        raise ContractViolation(f"scatter_rows: {rows.shape[0] if rows.ndim else 0} rows for source {a.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise ContractViolation(f"scatter_rows: row index out of range [0, {n})")
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, rows, a)
    return out, lambda g: (g[rows],)


def _layer_norm(a, eps=1e-8):
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return xhat, rule


def _masked_fill(a, mask, value):
    try:
        mask = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ContractViolation(f"masked_fill: mask {np.shape(mask)} vs input {a.shape}") from None
    out = np.where(mask, value, a)
    return out, lambda g: (np.where(mask, 0.0, g),)


def _topk(a, k):
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ContractViolation(f"topk: k={k} outside [1, {n}]")
    # stable sort of the negated scores keeps lower indices first among ties
    order = np.argsort(-a, axis=-1, kind="stable")[..., :k]
    idx = np.sort(order, axis=-1)
    out = np.take_along_axis(a, idx, axis=-1)

    def rule(g):
        full = np.zeros_like(a)
        np.put_along_axis(full, idx, g, axis=-1)
        return (full,)

    return out, rule, idx


def _concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in arrays)
        raise ContractViolation(f"concat: shapes {shapes} disagree off axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _transpose(a, axes=None):
    out = np.transpose(a, axes)
    inverse = None if axes is None else np.argsort(axes)
    return out, lambda g: (np.transpose(g, inverse),)


_PRIMITIVES: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "neg": _neg,
    "matmul": _matmul,
    "relu": _relu,
    "gelu": _gelu,
    "sigmoid": _sigmoid,
    "exp": _exp,
    "log": _log,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "sum": _sum,
    "mean": _mean,
    "gather": _gather,
    "scatter_rows": _scatter_rows,
    "layer_norm": _layer_norm,
    "masked_fill": _masked_fill,
    "topk": _topk,
    "concat": _concat,
    "reshape": _reshape,
    "transpose": _transpose,
}


def apply_primitive(kind: str, operands: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``kind`` on ``operands`` and record it when any needs grad.

    ``topk`` additionally attaches the selected indices to the result as
    ``out.aux`` (see :func:`topk`).
    """
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractViolation(f"unknown primitive {kind!r}") from None
    result = fn(*(t.data for t in operands), **attrs)
    aux = None
    if kind == "topk":
        out, rule, aux = result
    else:
        out, rule = result
    out = np.asarray(out, dtype=np.float64)
    if _debug and not np.all(np.isfinite(out)):
        raise NumericError(f"{kind}: non-finite output")
    needs = _grad_enabled and any(t.requires_grad for t in operands)
    res = Tensor._wrap(out, requires_grad=needs)
    if needs:
        res.node = Node(next(_ids), kind, tuple(operands), rule)
    res.aux = aux
    return res


def topk(x: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` entries along the last axis, returned in ascending index order.

    Gradient reaches only the selected entries.
    """
    out = apply_primitive("topk", [x], k=k)
    return out, out.aux


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim == 1:
        out = apply_primitive("matmul", [a.reshape(1, -1), b])
        return out.reshape(out.shape[:-2] + out.shape[-1:])
    return apply_primitive("matmul", [a, b])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


def scatter_rows(src: Tensor, rows, n: int) -> Tensor:
    """Rows of ``src`` summed into an ``n``-row zero tensor at ``rows``."""
    return apply_primitive("scatter_rows", [src], rows=rows, n=n)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Nodes reachable from one output, in recording (topological) order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            found.append(node)
            stack.extend(node.parents)
        found.sort(key=lambda n: n.id)
        return cls(found)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``loss``.

    Gradients accumulate into leaves across calls; the graph itself can be
    walked only once.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractViolation(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise ContractViolation("backward: loss is not on a tape")
    if loss.node.consumed:
        raise ContractViolation("backward: graph already consumed; rebuild it with a new forward pass")
    tape = Tape.from_output(loss)
    adjoint: dict[int, np.ndarray] = {loss.node.id: np.ones(())}
    owner: dict[int, Tensor] = {loss.node.id: loss}
    for node in reversed(tape.nodes):
        g = adjoint.pop(node.id, None)
        if g is not None:
            owner.pop(node.id).grad = g
            for parent, pg in zip(node.parents, node.rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                    continue
                key = parent.node.id
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg
                    owner[key] = parent
        node.consumed = True
        node.rule = None


def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (perturbs ``x`` in place)."""
    if eps <= 0:
        raise ContractViolation("finite_difference_grad: eps must be positive")
    flat = x.data.reshape(-1)
    out = np.empty(flat.shape)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _scalar(f(x))
            flat[i] = orig - eps
            lo = _scalar(f(x))
            flat[i] = orig
            out[i] = (hi - lo) / (2 * eps)
    return Tensor._wrap(out.reshape(x.shape))


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)
