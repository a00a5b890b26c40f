"""Tape-based reverse-mode differentiation over numpy arrays.

Every operation on a :class:`Tensor` records its parents and a closure that
maps the output gradient to parent gradients. :func:`backprop` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape
        return _node(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape
        return _node(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) - self

    def __neg__(self) -> "Tensor":
        return _node(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        return _node(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        return _node(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return _lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return _node(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data

        def back(g):
            if a.ndim == 1 and b.ndim == 1:
                return g * b, g * a
            if a.ndim == 1:
                return b @ g, np.outer(a, g)
            if b.ndim == 1:
                return np.outer(g, b), a.T @ g
            return g @ b.T, a.T @ g

        return _node(a @ b, (self, other), back)

    @property
    def T(self) -> "Tensor":
        return _node(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            if _is_basic_index(index):
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return _node(self.data[index], (self,), back)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return _node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    # reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # elementwise nonlinearities ------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _node(self.data * mask, (self,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return _node(out, (self,), lambda g: (g * out * (1.0 - out),))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return _node(np.log(a), (self,), lambda g: (g / a,))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, relu: bool = False) -> Tensor:
    """Fused ``x @ weight.T + bias`` (optionally followed by relu).

    ``x`` has shape (in,) or (batch, in).
    """
    x = _lift(x)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    mask = None
    if relu:
        mask = out > 0
        out = out * mask

    def back(g):
        if mask is not None:
            g = g * mask
        if xd.ndim == 1:
            gx, gw, gb = g @ wd, np.outer(g, xd), g
        else:
            gx, gw, gb = g @ wd, g.T @ xd, g.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


def lstm_cell(x, h, c, w_input: Tensor, w_hidden: Tensor, bias: Tensor) -> Tensor:
    """Fused LSTM recurrence; returns ``concat([h_next, c_next], -1)``.

    Gate blocks of the pre-activation are ordered input, forget, candidate, output.
    """
    x, h, c = _lift(x), _lift(h), _lift(c)
    xd, hd, cd = x.data, h.data, c.data
    n = hd.shape[-1]
    z = xd @ w_input.data.T + hd @ w_hidden.data.T + bias.data
    i = _sigmoid(z[..., :n])
    f = _sigmoid(z[..., n : 2 * n])
    g = np.tanh(z[..., 2 * n : 3 * n])
    o = _sigmoid(z[..., 3 * n :])
    c_next = f * cd + i * g
    tc = np.tanh(c_next)
    h_next = o * tc

    def back(grad):
        gh, gc = grad[..., :n], grad[..., n:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * cd * f * (1.0 - f), dc * i * (1.0 - g * g), gh * tc * o * (1.0 - o)],
            axis=-1,
        )
        if xd.ndim == 1:
            dwx, dwh, db = np.outer(dz, xd), np.outer(dz, hd), dz
        else:
            dwx, dwh, db = dz.T @ xd, dz.T @ hd, dz.sum(axis=0)
        return dz @ w_input.data, dz @ w_hidden.data, dc * f, dwx, dwh, db

    return _node(
        np.concatenate([h_next, c_next], axis=-1), (x, h, c, w_input, w_hidden, bias), back
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def softmax(z: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = _lift(z)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (z,), back)


def log_softmax(z: Tensor) -> Tensor:
    z = _lift(z)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (z,), back)


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each of ``params``.

    Parameters that do not appear in the graph get a zero gradient.
    Raises ``FloatingPointError`` if the loss or any gradient is not finite.
    """
    params = list(params)
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    out = []
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.reshape(g, p.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {p.name or 'parameter'}")
        out.append(g)
    return out
