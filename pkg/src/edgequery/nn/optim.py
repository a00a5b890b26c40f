"""Adam with bias correction over an ordered set of trainable tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from edgequery.nn.autodiff import Tensor


@dataclass
class ParameterSet:
    """Ordered trainable tensors of one network plus their Adam moments."""

    names: list[str]
    tensors: list[Tensor]
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if len(self.names) != len(self.tensors):
            raise ValueError("names and tensors differ in length")
        if not self.first_moment:
            self.first_moment = [np.zeros_like(t.data) for t in self.tensors]
        if not self.second_moment:
            self.second_moment = [np.zeros_like(t.data) for t in self.tensors]

    @classmethod
    def from_module(cls, module) -> "ParameterSet":
        named = module.named_parameters()
        return cls([n for n, _ in named], [t for _, t in named])

    @classmethod
    def from_modules(cls, modules: dict) -> "ParameterSet":
        names, tensors = [], []
        for prefix, module in modules.items():
            for n, t in module.named_parameters():
                names.append(f"{prefix}.{n}")
                tensors.append(t)
        return cls(names, tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def rebind(self, tensors: list[Tensor]) -> None:
        """Point at different tensor objects of identical shapes (after a clone)."""
        if [t.shape for t in tensors] != [t.shape for t in self.tensors]:
            raise ValueError("shape mismatch on rebind")
        self.tensors = list(tensors)


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def adam_step(
    params: ParameterSet,
    grads: list[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> ParameterSet:
    """Apply one Adam update in place and return ``params``."""
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    for name, t, g in zip(params.names, params.tensors, grads):
        if g.shape != t.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {t.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    if clip_norm is not None:
        grads = clip_by_global_norm(grads, clip_norm)
    params.step += 1
    k = params.step
    correction1 = 1.0 - beta1**k
    correction2 = 1.0 - beta2**k
    for i, (t, g) in enumerate(zip(params.tensors, grads)):
        m = params.first_moment[i]
        v = params.second_moment[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data = t.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params
