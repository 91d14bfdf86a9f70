"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` records the operation that produced it; calling
:meth:`Tensor.backward` on a scalar walks the tape in reverse topological
order and accumulates gradients into every tensor created with
``requires_grad=True``.

Only the operations needed by the losses and models in this package are
provided. ReLU uses the subgradient 0 at the kink.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "as_tensor",
    "concat_rows",
    "spmm",
    "no_grad_value",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    # -- basics -------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- elementwise arithmetic --------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data + b.data, _parents=(a, b),
                      _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data - b.data, _parents=(a, b),
                      _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data * b.data, _parents=(a, b),
                      _backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor(out, _parents=(a, b),
                      _backward=lambda g: (_unbroadcast(g / b.data, a.shape),
                                           _unbroadcast(-g * out / b.data, b.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        a = self
        return Tensor(a.data ** p, _parents=(a,),
                      _backward=lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data @ b.data, _parents=(a, b),
                      _backward=lambda g: (g @ b.data.T, a.data.T @ g))

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor(a.data[idx], _parents=(a,), _backward=back)

    def transpose(self) -> "Tensor":
        return Tensor(self.data.T, _parents=(self,), _backward=lambda g: (g.T,))

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor(a.data.reshape(*shape), _parents=(a,),
                      _backward=lambda g: (g.reshape(a.shape),))

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        a = self
        m = a.data.max(axis=axis, keepdims=True)
        e = np.exp(a.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out = np.log(s) + m
        soft = e / s

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * soft,)

        value = out if keepdims else np.squeeze(out, axis=axis)
        return Tensor(value, _parents=(a,), _backward=back)

    # -- nonlinearities -----------------------------------------------------
    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return Tensor(np.where(mask, a.data, 0.0), _parents=(a,),
                      _backward=lambda g: (g * mask,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        return Tensor(np.log(a.data), _parents=(a,), _backward=lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * 0.5 / out,))

    def sigmoid(self) -> "Tensor":
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out * (1.0 - out),))

    def log_sigmoid(self) -> "Tensor":
        # log s(x) = -softplus(-x), evaluated stably
        a = self
        out = -np.logaddexp(0.0, -a.data)
        sig_neg = 0.5 * (1.0 + np.tanh(-0.5 * a.data))
        return Tensor(out, _parents=(a,), _backward=lambda g: (g * sig_neg,))

    def clamp_min(self, floor: float) -> "Tensor":
        a = self
        mask = a.data > floor
        return Tensor(np.where(mask, a.data, floor), _parents=(a,),
                      _backward=lambda g: (g * mask,))

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return self - self.logsumexp(axis=axis, keepdims=True)

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor(out, _parents=(a,), _backward=back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def no_grad_value(x) -> np.ndarray:
    """Plain array view of a tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def spmm(P, H: Tensor) -> Tensor:
    """Constant (dense or scipy-sparse) matrix times a tensor: ``P @ H``."""
    H = as_tensor(H)
    if isinstance(P, Tensor):
        return P @ H
    if sp.issparse(P):
        out = np.asarray(P @ H.data)
        Pt = P.T.tocsr()
        return Tensor(out, _parents=(H,), _backward=lambda g: (np.asarray(Pt @ g),))
    P = np.asarray(P, dtype=np.float64)
    return Tensor(P @ H.data, _parents=(H,), _backward=lambda g: (P.T @ g,))


def concat_rows(parts: Sequence[Tensor] | Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=0))

    return Tensor(np.concatenate([p.data for p in parts], axis=0),
                  _parents=tuple(parts), _backward=back)
