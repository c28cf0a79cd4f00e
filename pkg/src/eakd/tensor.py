"""Dense float64 tensors with tape-based reverse-mode autodiff.

Operations are recorded only while a :class:`Graph` is active::

    with Graph() as g:
        loss = mean_all(relu(x @ w))
    backward(g, loss)

Outside a graph every op is a plain numpy computation, which is how the
trainer runs frozen-teacher forwards and evaluation.

Broadcasting is deliberately narrow: scalar-by-tensor and adding a row
vector to every row of a matrix. Every other mismatch raises
:class:`DimensionError`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_state = threading.local()


class Tensor:
    """A float64 array plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        graph = current_graph()
        if graph is None:
            raise ContractError("Tensor.backward() called outside a Graph; use backward(graph, loss)")
        backward(graph, self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, data={np.array2string(self.data, precision=6)})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered tape of recorded operations.

    Nodes are appended in execution order, so every node's inputs were
    produced by an earlier node or are leaves. :func:`backward` walks the
    list in exact reverse order, which keeps gradient accumulation order
    (and therefore the bits of every gradient) fixed.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def current_graph() -> Graph | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, grad_fn) -> Tensor:
    graph = current_graph()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    if tracked:
        graph.nodes.append(Node(op, inputs, result, grad_fn))
    return result


def backward(graph: Graph, loss: Tensor) -> None:
    """Fill ``.grad`` on every leaf tensor of ``graph`` that requires grad.

    Leaf gradients are overwritten, not accumulated. Leaves with no path to
    ``loss`` receive zeros.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    produced = {id(node.output) for node in graph.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
            continue
        for t, tg in zip(node.inputs, node.grad_fn(g)):
            if not t.requires_grad:
                continue
            if id(t) not in produced:
                leaves.setdefault(id(t), t)
            if tg is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
    if not graph.nodes and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)


# --- elementwise and linear algebra ------------------------------------------------


def _scalar_value(x) -> float | None:
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


def add(a, b) -> Tensor:
    """``a + b``; ``b`` may be a Python scalar, 0-d tensor or a row-vector bias."""
    a = _as_tensor(a)
    s = _scalar_value(b)
    if s is not None:
        return _emit("add_scalar", (a,), a.data + s, lambda g: (g,))
    b = _as_tensor(b)
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.data.ndim == 0:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, np.sum(g)))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit("add_bias", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def sub(a, b) -> Tensor:
    s = _scalar_value(b)
    if s is not None:
        return add(a, -s)
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a scalar."""
    a = _as_tensor(a)
    s = _scalar_value(b)
    if s is not None:
        return _emit("scale", (a,), a.data * s, lambda g: (g * s,))
    b = _as_tensor(b)
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))
    if bd.ndim == 0:
        return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, np.sum(g * ad)))
    if ad.ndim == 0:
        return mul(b, a)
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


# --- reductions and indexing -------------------------------------------------------


def sum_rows(a) -> Tensor:
    """Sum each row of an N×C matrix into an N-vector."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"sum_rows expects a matrix, got shape {a.shape}")
    n, c = a.shape
    return _emit("sum_rows", (a,), a.data.sum(axis=1), lambda g: (np.repeat(g[:, None], c, axis=1),))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum_all", (a,), np.sum(a.data), lambda g: (np.full(shape, float(g)),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    if n == 0:
        raise DimensionError("mean_all of an empty tensor")
    return _emit("mean_all", (a,), np.sum(a.data) / n, lambda g: (np.full(shape, float(g) / n),))


def _check_index(index, n: int, c: int) -> np.ndarray:
    idx = np.asarray(index)
    if idx.shape != (n,) or not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError(f"index must be {n} integers, got shape {idx.shape} dtype {idx.dtype}")
    if n and (idx.min() < 0 or idx.max() >= c):
        raise DimensionError(f"index out of range [0, {c})")
    return idx.astype(np.intp)


def gather(a, index) -> Tensor:
    """Pick ``a[n, index[n]]`` for every row."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"gather expects a matrix, got shape {a.shape}")
    n, c = a.shape
    idx = _check_index(index, n, c)
    rows = np.arange(n)

    def grad_fn(g):
        out = np.zeros((n, c))
        out[rows, idx] = g
        return (out,)

    return _emit("gather", (a,), a.data[rows, idx], grad_fn)


def detach(a) -> Tensor:
    """Same values, cut out of the graph."""
    a = _as_tensor(a)
    return Tensor(a.data.copy())


# --- softmax family ----------------------------------------------------------------


def _scaled(z: Tensor, temperature: float, exclude) -> tuple[np.ndarray, np.ndarray | None]:
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if z.data.ndim != 2:
        raise DimensionError(f"expected an N×C matrix, got shape {z.shape}")
    x = z.data / temperature
    if exclude is None:
        return x, None
    n, c = z.shape
    if c < 2:
        raise DimensionError("excluding a column needs at least two columns")
    idx = _check_index(exclude, n, c)
    mask = np.ones((n, c), dtype=bool)
    mask[np.arange(n), idx] = False
    return x, mask


def _lse(x: np.ndarray, mask: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Row logsumexp and the matching softmax (zero outside ``mask``)."""
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=1, keepdims=True)
    shifted = x - m
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s))[:, 0], e / s


def logsumexp(z, temperature: float = 1.0, exclude=None) -> Tensor:
    """Row-wise ``log Σ_i exp(z_i / T)``, optionally skipping column ``exclude[n]``."""
    z = _as_tensor(z)
    x, mask = _scaled(z, temperature, exclude)
    out, p = _lse(x, mask)
    return _emit("logsumexp", (z,), out, lambda g: (p * g[:, None] / temperature,))


def log_softmax(z, temperature: float = 1.0, exclude=None) -> Tensor:
    """Row-wise ``z/T - logsumexp(z/T)``.

    With ``exclude`` the softmax runs over the remaining columns; excluded
    entries come out as 0 and receive no gradient.
    """
    z = _as_tensor(z)
    x, mask = _scaled(z, temperature, exclude)
    lse, p = _lse(x, mask)
    out = x - lse[:, None]
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def grad_fn(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return ((g - p * g.sum(axis=1, keepdims=True)) / temperature,)

    return _emit("log_softmax", (z,), out, grad_fn)


def stable_log_softmax(z, temperature: float = 1.0) -> Tensor:
    return log_softmax(z, temperature)


def softmax(z, temperature: float = 1.0) -> np.ndarray:
    """Detached probabilities, routed through :func:`log_softmax`."""
    return np.exp(log_softmax(detach(z), temperature).data)
