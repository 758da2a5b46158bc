"""Small dense tensor library with reverse-mode gradients.

Everything is float64 and numpy-backed. Each op records its parents and a
backward closure on the output tensor; ``backward`` walks the recorded
graph once in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptyOpenListError(ValueError):
    """A selection was requested over an all-zero open mask."""


class GraphContractError(RuntimeError):
    """Misuse of the gradient graph (e.g. non-scalar loss)."""


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: BackwardFn | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div_scalar(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them (evaluation passes); per thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def record(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Create an op output; parents are kept only if one of them needs gradients.

    ``backward_fn`` maps the output gradient to one gradient per parent
    (``None`` for parents that receive nothing).
    """
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


class Graph:
    """Recorded operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Leaf gradients accumulate across calls until reset with ``zero_grad``.
    Intermediate gradients live only for the duration of the call.
    """
    if loss.size != 1:
        raise GraphContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphContractError("loss does not depend on any tensor requiring gradients")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return record(a.data * s, (a,), lambda g: (g * s,), "scale")


def div_scalar(a, s: float) -> Tensor:
    s = float(s)
    if s == 0.0:
        raise ZeroDivisionError("division of a tensor by zero")
    return scale(a, 1.0 / s)


def add_scalar(a, s: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data + float(s), (a,), lambda g: (g,), "add_scalar")


def abs_(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, exp, neg, abs, div (b a scalar)."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "exp":
        return exp(a)
    if kind == "neg":
        return neg(a)
    if kind == "abs":
        return abs_(a)
    if kind == "div":
        if isinstance(b, Tensor):
            if b.size != 1:
                raise DimensionError("div only supports a scalar divisor")
            b = b.item()
        return div_scalar(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return record(out, (a,), bw, "gelu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# reductions and shape ops -------------------------------------------------

def sum_(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    return div_scalar(sum_(a), a.size)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return record(np.array(a.data[key]), (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                  lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; batched over leading axes when both operands share them."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return record(ad @ bd, (a, b), bw, "matmul")


def add_bias(x, bias) -> Tensor:
    """x[..., D] + bias[D], the one broadcast this library supports."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return record(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)), "add_bias")


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return add_bias(out, bias) if bias is not None else out


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (a,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    axes = tuple(range(x.data.ndim - 1))

    def bw(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return record(out, (x, gain, bias), bw, "layer_norm")


# selection -----------------------------------------------------------------

def masked_softmax(scores, mask, tau: float) -> Tensor:
    """exp(-scores/tau) * mask, normalized over the mask.

    Scores are shifted by their minimum over the mask before exponentiation;
    the result is unchanged mathematically and cannot overflow. Shifts too
    large to represent become inf and contribute exactly zero weight.
    """
    scores = as_tensor(scores)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.shape != scores.shape:
        raise DimensionError(f"masked_softmax: mask {m.shape} vs scores {scores.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    open_ = m > 0
    if not open_.any():
        raise EmptyOpenListError("open list is empty")
    s = scores.data
    with np.errstate(over="ignore"):
        shifted = np.where(open_, s - s[open_].min(), 0.0)
        e = np.where(open_, np.exp(-shifted / tau), 0.0)
    out = e / e.sum()

    def bw(g):
        return (-(out * (g - (g * out).sum())) / tau,)

    return record(out, (scores,), bw, "masked_softmax")


def one_hot_argmax(p: np.ndarray) -> np.ndarray:
    """One-hot at the first (row-major) maximum of ``p``."""
    out = np.zeros_like(p, dtype=np.float64)
    out.flat[int(np.argmax(p))] = 1.0
    return out


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradients pass unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise DimensionError("straight_through: hard and soft shapes differ")
    return record(hard, (soft,), lambda g: (g,), "straight_through")
