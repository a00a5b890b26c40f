"""Single-queue, single-server service facility standing in for network plus edge-cloud.

A packet in service completes in any slot with probability ``q``,
independently of how long it has been served, so service times are
Geometric(q) on {1, 2, ...}. The queue is FIFO and unbounded.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from edgequery.sim.source import RandomStream


@dataclass(frozen=True)
class Measurement:
    state: np.ndarray
    generated_at: int


@dataclass
class FacilityState:
    q: float
    rng_seed: int = 0
    queue: deque = field(default_factory=deque)
    in_service: Measurement | None = None
    stream: RandomStream | None = None

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.stream is None:
            self.stream = RandomStream(self.rng_seed)

    def __len__(self) -> int:
        return len(self.queue) + (self.in_service is not None)

    @property
    def idle(self) -> bool:
        return self.in_service is None


def facility_enqueue(f: FacilityState, m: Measurement) -> FacilityState:
    if f.in_service is None:
        f.in_service = m
    else:
        f.queue.append(m)
    return f


def facility_step(f: FacilityState) -> tuple[FacilityState, Measurement | None]:
    """Serve for one slot; return the packet that completed, if any.

    The queue head moves into the server on a departure but is only eligible
    to complete from the next call on.
    """
    if f.in_service is None:
        return f, None
    if f.q < 1.0 and f.stream.uniform() >= f.q:
        return f, None
    done = f.in_service
    f.in_service = f.queue.popleft() if f.queue else None
    return f, done
