"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every functional op here accepts either plain arrays or :class:`Tensor`
objects. With plain arrays the op is an ordinary numpy computation and returns
an ndarray, so the same loss code serves both evaluation and training.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from oodcl.errors import ZeroVector

ZERO_NORM_THRESHOLD = 1e-12


class Tensor:
    """A node in a dynamically built computation graph."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return _make(self.data.T, (self,), lambda g: (g.T,))

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def sum(self, axis: int | None = None) -> "Tensor":
        shape = self.data.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape),)

        return _make(self.data.sum(axis=axis), (self,), back)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def __add__(self, other):
        a, b = self, _lift(other)
        return _make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        a, b = self, _lift(other)
        return _make(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        a, b = self, _lift(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul is defined for 2-D operands only")
        return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def value(x) -> np.ndarray:
    """The underlying array of ``x``, whether Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def detach(x):
    """Cut ``x`` out of the graph; gradients stop here."""
    return Tensor(x.data.copy()) if isinstance(x, Tensor) else x


def relu(x):
    if not isinstance(x, Tensor):
        return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _lse_forward(x: np.ndarray, axis: int, mask: np.ndarray | None):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    # ufunc reductions directly: this sits on the hot path of every loss
    m = np.maximum.reduce(x, axis=axis, keepdims=True)
    shifted = np.exp(x - m)
    s = np.add.reduce(shifted, axis=axis, keepdims=True)
    return np.squeeze(m + np.log(s), axis=axis), shifted, s


def logsumexp(x, axis: int = -1, mask=None):
    """log sum exp along ``axis`` with a max shift.

    ``mask`` (boolean, same shape as ``x``) selects the entries that take part;
    each reduced slice must keep at least one entry.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    out, shifted, total = _lse_forward(value(x), axis, mask)
    if not isinstance(x, Tensor):
        return out
    softmax = shifted / total
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * softmax,))


def normalize_rows(x):
    """Scale every row of a 2-D array to unit Euclidean norm."""
    data = value(x)
    norms = np.sqrt(np.add.reduce(data * data, axis=-1, keepdims=True))
    if norms.size and norms.min() < ZERO_NORM_THRESHOLD:
        raise ZeroVector("cannot normalize a vector with norm below 1e-12")
    y = data / norms
    if not isinstance(x, Tensor):
        return y

    def back(g):
        radial = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - y * radial) / norms,)

    return _make(y, (x,), back)


def concat(xs: Sequence, axis: int = 0):
    if not is_tensor(*xs):
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)
    parts = [_lift(x) for x in xs]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back)
