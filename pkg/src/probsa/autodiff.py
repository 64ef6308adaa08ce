"""Small reverse-mode differentiation engine over dense float64 arrays.

A ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record their parents and a vector-Jacobian closure; ``backward``
walks the record in reverse topological order, visiting each node once, and
accumulates ``grad`` on leaf tensors.

Shapes are strict: the only broadcast allowed is adding a length-``d`` bias to
every row of an ``n x d`` matrix (and scalars combined with anything).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a computation graph."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: VJP | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

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
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self) -> Tensor:
        return tsum(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom(value, parents: Sequence, vjp: VJP, op: str) -> Tensor:
    """Create the output of a primitive.

    ``vjp(g)`` maps the output gradient to one gradient (or None) per parent.
    Ops defined outside this module register themselves the same way.
    """
    parents = tuple(as_tensor(p) for p in parents)
    data = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 0:
        return "scalar_a"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "bias_b"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "bias_a"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: str, which: str) -> np.ndarray:
    if kind == f"scalar_{which}":
        return np.asarray(g.sum())
    if kind == f"bias_{which}":
        return g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "add")
    return custom(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, kind, "a"), _unbroadcast(g, kind, "b")), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "sub")
    return custom(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, kind, "a"), -_unbroadcast(g, kind, "b")), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "mul")
    return custom(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, kind, "a"),
                             _unbroadcast(g * a.data, kind, "b")), "mul")


def matmul(a, b) -> Tensor:
    """Matrix product for matrix@matrix, matrix@vector and vector@matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")

    def vjp(g):
        ga = np.outer(g, b.data) if b.ndim == 1 else g @ b.data.T
        gb = np.outer(a.data, g) if a.ndim == 1 else a.data.T @ g
        return ga, gb

    return custom(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return custom(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return custom(np.array(a.data[idx]), (a,), vjp, "getitem")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        return [np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return custom(np.concatenate([p.data for p in parts], axis=axis), parts, vjp, "concat")


def tsum(a: Tensor) -> Tensor:
    return custom(a.data.sum(), (a,), lambda g: (np.full_like(a.data, float(g)),), "sum")


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a matrix (average over axis 0)."""
    n = a.shape[0]
    return custom(a.data.mean(axis=0), (a,),
                  lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean_rows")


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape}, {b.shape}")
    return custom(a.data @ b.data, (a, b), lambda g: (g * b.data, g * a.data), "dot")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return custom(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_np(a.data)
    return custom(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    a = as_tensor(a)
    return custom(_softplus_np(a.data), (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return custom(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return custom(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return custom(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("sqrt: input must be strictly positive")
    y = np.sqrt(a.data)
    return custom(y, (a,), lambda g: (0.5 * g / y,), "sqrt")


def softmax(a) -> Tensor:
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("softmax of an empty input")
    s = _softmax_np(a.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return custom(s, (a,), vjp, "softmax")


LN_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise each row to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: shapes {x.shape}, {gain.shape}, {bias.shape}")
    d = x.shape[1]
    xc = x.data - x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gx = g * gain.data
        dx = inv / d * (d * gx - gx.sum(axis=1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return custom(xhat * gain.data + bias.data, (x, gain, bias), vjp, "layer_norm")


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad += g
            continue
        for p, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = np.asarray(gp, dtype=np.float64)


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(param) per param; unreachable params get zeros.

    Existing ``grad`` buffers on ``params`` are left untouched.
    """
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    backward(loss)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out
