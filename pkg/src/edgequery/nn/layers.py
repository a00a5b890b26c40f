"""Dense layers, the recurrent cell, and the small module system around them."""

from __future__ import annotations

import copy

import numpy as np

from edgequery.nn.autodiff import Tensor, linear, lstm_cell, parameter

ACTIVATIONS = ("relu", "identity", "tanh")


class Module:
    """Anything holding named trainable tensors, possibly in sub-modules."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def clone(self) -> "Module":
        return copy.deepcopy(self)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, activation: str = "relu", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_out, n_in)), "weight")
        self.bias = parameter(rng.uniform(-bound, bound, size=n_out), "bias")
        self.activation = activation

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def zero_(self) -> "Dense":
        self.weight.data[:] = 0.0
        self.bias.data[:] = 0.0
        return self

    def __call__(self, x) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: Dense, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"expected input width {layer.n_in}, got {x.shape[-1]}")
    if layer.activation == "relu":
        return linear(x, layer.weight, layer.bias, relu=True)
    out = linear(x, layer.weight, layer.bias)
    if layer.activation == "tanh":
        return out.tanh()
    return out


class MLP(Module):
    """Stack of dense layers: hidden layers share one activation, the last is linear."""

    def __init__(self, sizes: list[int], hidden_activation: str = "relu", rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.layers = [
            Dense(a, b, hidden_activation if i < len(sizes) - 2 else "identity", rng)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LSTMCell(Module):
    """Gate rows are stacked in the order input, forget, candidate, output."""

    def __init__(self, n_in: int, hidden_size: int, rng=None, forget_bias: float = 1.0):
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / np.sqrt(hidden_size)
        h4 = 4 * hidden_size
        self.w_input = parameter(rng.uniform(-bound, bound, size=(h4, n_in)), "w_input")
        self.w_hidden = parameter(rng.uniform(-bound, bound, size=(h4, hidden_size)), "w_hidden")
        bias = np.zeros(h4)
        bias[hidden_size : 2 * hidden_size] = forget_bias
        self.bias = parameter(bias, "bias")
        self.hidden_size = hidden_size

    @property
    def n_in(self) -> int:
        return self.w_input.shape[1]

    def zero_state(self, batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return np.zeros(shape), np.zeros(shape)

    def __call__(self, x, h, c) -> tuple[Tensor, Tensor]:
        return lstm_step(self, x, h, c)


def lstm_step(cell: LSTMCell, x, h, c) -> tuple[Tensor, Tensor]:
    x, h, c = (v if isinstance(v, Tensor) else Tensor(v) for v in (x, h, c))
    n = cell.hidden_size
    if x.shape[-1] != cell.n_in or h.shape[-1] != n or c.shape[-1] != n:
        raise ValueError(
            f"lstm shapes: x {x.shape} (want {cell.n_in}), h {h.shape}, c {c.shape} (want {n})"
        )
    hc = lstm_cell(x, h, c, cell.w_input, cell.w_hidden, cell.bias)
    return hc[..., :n], hc[..., n:]
