"""Tape-style reverse-mode autodiff over dense float64 numpy arrays.

Every primitive builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  ``backward``
topologically orders the graph reachable from a scalar loss and runs the
closures in reverse.  The graph is consumed by ``backward``; running it twice
raises, and leaf gradients accumulate until :func:`zero_grad` resets them.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class _GradState(threading.local):
    enabled = True


_state = _GradState()


def grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731
    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return sub(as_tensor(other), self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.name = None
    if _state.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim and b.data.ndim:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(grad: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operands receive the summed gradient
    if t.data.ndim == 0 and grad.ndim:
        return np.asarray(grad.sum())
    return grad


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unscalar(g * bd, a), _unscalar(g * ad, b)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)  # subgradient 0 at 0
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def square_sum(x: Tensor) -> Tensor:
    """sum(x * x) as one node; used for the weight-decay term."""
    d = x.data
    return _make(np.asarray(np.dot(d.ravel(), d.ravel())), (x,), lambda g: (2.0 * g * d,))


# -- linear algebra and shape ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None),
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n bias to every row of an (m, n) tensor."""
    if x.shape[-1:] != bias.shape:
        raise ValueError(f"add_bias: shape mismatch {x.shape} vs {bias.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length n by repetition."""
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(data, (x,), lambda g: (g.sum(axis=axis),))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _make(
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(data, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of the last axis."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _make(x.data[..., start:stop], (x,), back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _make(x.data[start:stop], (x,), back)


def stack_rows(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    return concat(xs, axis=0)


# -- nn primitives ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def lookup(table: Tensor, index) -> Tensor:
    """Row gather; ``index`` may be an int (returns a row) or an int array."""
    idx = np.asarray(index, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"lookup: index out of range for table with {v} rows")
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), back)


def cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Summed -log softmax(logits)[target].

    ``logits`` is (n,) with an int target, or (m, n) with m targets.  Optional
    per-row ``weights`` (e.g. a padding mask) scale each row's term.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = z2.shape[1]
    if tgt.shape[0] != z2.shape[0]:
        raise ValueError("cross_entropy: one target per row required")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n):
        raise IndexError(f"cross_entropy: target out of range for {n} classes")
    w = np.ones(z2.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = log_softmax(z2)
    rows = np.arange(z2.shape[0])
    loss = -(w * logp[rows, tgt]).sum()

    def back(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        grad = g * w[:, None] * p
        return (grad[0] if single else grad,)

    return _make(np.asarray(loss), (logits,), back)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def straight_through(probs: Tensor, sample: np.ndarray) -> Tensor:
    """Emit ``sample`` forward; pass gradients to ``probs`` unchanged."""
    return _make(np.asarray(sample, dtype=np.float64), (probs,), lambda g: (g,))


# -- graph traversal ---------------------------------------------------------------


def build_graph(loss: Tensor) -> list[Tensor]:
    """Topological order of all nodes reachable from ``loss`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed; recompute the forward pass")
    if not loss.requires_grad:
        return
    order = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._consumed = True
        node._backward = None
        node._parents = ()
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
