"""Reverse-mode differentiation over numpy arrays.

A `Tensor` wraps a float64 array and records how it was produced. Calling
`backward()` on a scalar result walks the recorded graph in reverse
topological order and accumulates `.grad` on every tensor that requires it.

Only the operations defined here are differentiable. Numpy ufuncs refuse to
consume a Tensor (`__array_ufunc__ = None`), so a closure that slips into raw
numpy fails loudly instead of silently dropping gradient.
"""

from collections.abc import Callable, Sequence

import numpy as np


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] = lambda g: None
        self._op = _op

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    # --- graph plumbing -----------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def _child(self, data, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        tracked = tuple(p for p in parents if p.requires_grad)
        return Tensor(data, requires_grad=bool(tracked), _parents=tracked, _op=op)

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self) -> None:
        """Populate `.grad` on every tracked ancestor of this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is not None and node._parents:
                node._backward(node.grad)

    # --- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        out = self._child(self.data + other.data, (self, other), "+")

        def _backward(g):
            self._accumulate(g)
            other._accumulate(g)

        out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = self._child(-self.data, (self,), "neg")
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        out = self._child(self.data - other.data, (self, other), "-")

        def _backward(g):
            self._accumulate(g)
            other._accumulate(-g)

        out._backward = _backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        out = self._child(self.data * other.data, (self, other), "*")

        def _backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        out = self._child(self.data / other.data, (self, other), "/")

        def _backward(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / other.data**2)

        out._backward = _backward
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        out = self._child(self.data**exponent, (self,), f"**{exponent}")
        out._backward = lambda g: self._accumulate(g * exponent * self.data ** (exponent - 1))
        return out

    def __matmul__(self, other) -> "Tensor":
        other = self._lift(other)
        out = self._child(self.data @ other.data, (self, other), "@")

        def _backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        out._backward = _backward
        return out

    def __rmatmul__(self, other) -> "Tensor":
        return self._lift(other) @ self

    # --- reductions and shape ---------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        out = self._child(self.data.sum(axis=axis), (self,), "sum")

        def _backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        out._backward = _backward
        return out

    def mean(self, axis: int | None = None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        out = self._child(self.data.reshape(*shape), (self,), "reshape")
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    # --- elementwise nonlinearities -----------------------------------------

    def silu(self) -> "Tensor":
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out = self._child(self.data * sig, (self,), "silu")
        out._backward = lambda g: self._accumulate(g * (sig + self.data * sig * (1.0 - sig)))
        return out

    def clip(self, low: float, high: float) -> "Tensor":
        """Clamp values; gradient passes only where the input was strictly inside."""
        inside = (self.data > low) & (self.data < high)
        out = self._child(np.clip(self.data, low, high), (self,), "clip")
        out._backward = lambda g: self._accumulate(g * inside)
        return out

    def map(self, fn: Callable[[np.ndarray], np.ndarray], dfn: Callable[[np.ndarray], np.ndarray]) -> "Tensor":
        """Apply an elementwise function with a caller-supplied derivative."""
        out = self._child(fn(self.data), (self,), getattr(fn, "__name__", "map"))
        out._backward = lambda g: self._accumulate(g * dfn(self.data))
        return out


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def leaves(arrays: Sequence[np.ndarray]) -> list[Tensor]:
    """Fresh gradient-tracking leaves, one per array (copies, never aliases)."""
    return [Tensor(np.array(a, dtype=np.float64, copy=True), requires_grad=True) for a in arrays]


def tree_sum(values: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise sum in a fixed order, so results do not depend on worker count."""
    if not values:
        raise ValueError("tree_sum needs at least one value")
    level = list(values)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]
