"""Synthetic 2-D vehicle source: a double integrator with bounded random acceleration.

A source state is a float array ``[x, y, vx, vy]`` (meters, meters/second),
or a ``(batch, 4)`` array of such rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from edgequery.units import SLOT_SECONDS

STATE_DIM = 4


@dataclass(frozen=True)
class SourceParams:
    max_speed: float = 10.0
    acceleration_std: float = 1.0
    acceleration_bound: float = 3.0
    dt: float = SLOT_SECONDS
    arena: float = 100.0  # half-width of the box initial positions are drawn from

    def __post_init__(self):
        if self.max_speed <= 0 or self.acceleration_std < 0 or self.acceleration_bound <= 0:
            raise ValueError(f"invalid source parameters: {self}")


class RandomStream:
    """Buffered draws from one numpy Generator; cheap per-scalar access."""

    def __init__(self, seed_or_rng, block: int = 4096):
        self.rng = np.random.default_rng(seed_or_rng)
        self.block = block
        self._u: list[float] = []
        self._n: list[float] = []

    def uniform(self) -> float:
        if not self._u:
            self._u = self.rng.random(self.block).tolist()
            self._u.reverse()
        return self._u.pop()

    def normal(self) -> float:
        if not self._n:
            self._n = self.rng.standard_normal(self.block).tolist()
            self._n.reverse()
        return self._n.pop()

    def truncated_normal(self, std: float, bound: float) -> float:
        if std == 0.0:
            return 0.0
        while True:
            a = self.normal() * std
            if abs(a) <= bound:
                return a


def initial_state(stream: RandomStream, params: SourceParams = SourceParams()) -> np.ndarray:
    x = (2 * stream.uniform() - 1) * params.arena
    y = (2 * stream.uniform() - 1) * params.arena
    heading = 2 * np.pi * stream.uniform()
    speed = params.max_speed * stream.uniform()
    return np.array([x, y, speed * np.cos(heading), speed * np.sin(heading)])


def draw_acceleration(stream: RandomStream, params: SourceParams = SourceParams()) -> np.ndarray:
    return np.array(
        [
            stream.truncated_normal(params.acceleration_std, params.acceleration_bound),
            stream.truncated_normal(params.acceleration_std, params.acceleration_bound),
        ]
    )


def source_step(
    state: np.ndarray,
    stream: RandomStream | None = None,
    params: SourceParams = SourceParams(),
    acceleration: np.ndarray | None = None,
) -> np.ndarray:
    """Advance one slot. Works on a single state or a batch of states.

    Either ``acceleration`` (shape (2,) or (batch, 2)) is given, or one is drawn
    from ``stream``.
    """
    state = np.asarray(state, dtype=np.float64)
    if acceleration is None:
        if stream is None:
            raise ValueError("need a random stream or an explicit acceleration")
        if state.ndim == 1:
            acceleration = draw_acceleration(stream, params)
        else:
            acceleration = np.stack([draw_acceleration(stream, params) for _ in range(len(state))])
    acceleration = np.asarray(acceleration, dtype=np.float64)
    dt = params.dt
    pos = state[..., :2] + state[..., 2:] * dt
    vel = state[..., 2:] + acceleration * dt
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    over = speed > params.max_speed
    vel = np.where(over, vel * (params.max_speed / np.where(over, speed, 1.0)), vel)
    return np.concatenate([pos, vel], axis=-1)
