"""Actor/critic input assembly and the per-agent backlog counter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from edgequery.sim.source import STATE_DIM

OBSERVATION_KINDS = ("qnet", "qnet-xhat", "qnet-lambda")

STATE_SCALE = 10.0
AGE_SCALE = 100.0


def backlog_update(b: int, queried: bool, arrived: bool) -> int:
    """+1 for a query, -1 for an arrival, both apply in the same slot, floor at zero."""
    if b < 0:
        raise ValueError("backlog must be non-negative")
    return max(b + int(bool(queried)) - int(bool(arrived)), 0)


@dataclass
class BacklogCounter:
    b: int = 0

    def update(self, queried: bool, arrived: bool) -> int:
        self.b = backlog_update(self.b, queried, arrived)
        return self.b


class NetworkStats:
    """Backlog and inter-arrival time per episode, for the QNet-lambda input."""

    def __init__(self, n: int):
        self.backlog = np.zeros(n, dtype=np.int64)
        self.since_arrival = np.zeros(n)
        self.interarrival = np.zeros(n)

    def update(self, queried: np.ndarray, arrived: np.ndarray) -> None:
        queried = np.asarray(queried, dtype=np.int64)
        arrived = np.asarray(arrived, dtype=bool)
        self.backlog = np.maximum(self.backlog + queried - arrived.astype(np.int64), 0)
        self.since_arrival += 1
        self.interarrival = np.where(arrived, self.since_arrival, self.interarrival)
        self.since_arrival = np.where(arrived, 0.0, self.since_arrival)


def observation_dim(kind: str) -> int:
    if kind == "qnet":
        return STATE_DIM + 1
    if kind == "qnet-xhat":
        return STATE_DIM
    if kind == "qnet-lambda":
        return STATE_DIM + 3
    raise ValueError(f"unknown observation kind {kind!r}; expected one of {OBSERVATION_KINDS}")


def build_observation(kind: str, estimate, latest, age, stats: NetworkStats | None = None) -> np.ndarray:
    """Rows of actor/critic input, one per episode.

    The estimate enters relative to the latest received measurement so the
    input does not depend on where in the plane the source happens to be.
    Both features are squashed with tanh: a deterministic policy can wander
    to ages far beyond anything seen in training, and a bounded input keeps
    the critic from extrapolating there.
    """
    estimate = np.atleast_2d(estimate)
    rel = np.tanh((estimate - np.atleast_2d(latest)) / STATE_SCALE)
    age_col = np.tanh(np.atleast_1d(np.asarray(age, dtype=np.float64)) / AGE_SCALE)[:, None]
    if kind == "qnet":
        return np.concatenate([rel, age_col], axis=1)
    if kind == "qnet-xhat":
        return rel
    if kind == "qnet-lambda":
        if stats is None:
            raise ValueError("qnet-lambda needs network statistics")
        extra = np.tanh(np.stack([stats.backlog / 10.0, stats.interarrival / AGE_SCALE], axis=1))
        return np.concatenate([rel, age_col, extra], axis=1)
    raise ValueError(f"unknown observation kind {kind!r}; expected one of {OBSERVATION_KINDS}")
