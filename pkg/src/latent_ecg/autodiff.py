"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every operation produces a :class:`Tensor` that remembers its parents and a
vector-Jacobian product. :func:`grad` walks the graph backwards from a scalar
loss. Values are kept in float64 and checked for NaN/Inf after every op.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "as_tensor",
    "custom_op",
    "grad",
    "value_and_grad",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "maximum",
    "concat",
    "stack",
]


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    return data


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = _checked(np.array(data, dtype=np.float64), "tensor creation")
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    # -- construction helpers --------------------------------------------
    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = _checked(data, op)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._node(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y
        return Tensor._node(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, power: float):
        x = self.data
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = x**power
        return Tensor._node(out, (self,), lambda g: (g * power * x ** (power - 1),), "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        def vjp(g):
            if x.ndim == 1 and y.ndim == 2:
                return g @ y.T, np.outer(x, g)
            if x.ndim == 2 and y.ndim == 1:
                return np.outer(g, y), x.T @ g
            if x.ndim == 1 and y.ndim == 1:
                return g * y, g * x
            gx = g @ np.swapaxes(y, -1, -2)
            gy = np.swapaxes(x, -1, -2) @ g
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._node(x @ y, (self, other), vjp, "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # -- structure -----------------------------------------------------------
    def __getitem__(self, index):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._node(self.data[index], (self,), vjp, "index")

    def reshape(self, *shape):
        old = self.shape
        return Tensor._node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    @property
    def T(self):
        return Tensor._node(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, name: str = "custom") -> Tensor:
    """Create a node with a hand-written vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or ``None``) per parent.
    """
    return Tensor._node(np.asarray(data, dtype=np.float64), tuple(parents), vjp, name)


# -- elementwise functions -------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._node(out, (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return Tensor._node(d * d, (x,), lambda g: (2.0 * g * d,), "square")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; the gradient is zero where the floor is active."""
    x = as_tensor(x)
    mask = x.data > floor
    return Tensor._node(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "maximum")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return Tensor._node(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# -- backward pass -----------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters that the loss does not depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else _checked(g.reshape(p.shape), "backward"))
    return out


def value_and_grad(fn: Callable[..., Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn()`` and return its value with gradients w.r.t. ``params``."""
    loss = fn()
    return float(loss.data), grad(loss, params)
