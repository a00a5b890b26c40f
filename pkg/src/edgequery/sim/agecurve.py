"""Average age under i.i.d. Bernoulli(p) querying, as a function of utilization p/q."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from edgequery.sim.age import AgeClock, age_tick
from edgequery.sim.facility import FacilityState, Measurement, facility_enqueue, facility_step
from edgequery.sim.source import RandomStream


def bernoulli_average_age(q: float, p: float, slots: int, seed: int) -> float:
    arrivals_seed, service_seed = np.random.SeedSequence(seed).spawn(2)
    arrivals = RandomStream(np.random.default_rng(arrivals_seed))
    facility = FacilityState(q, stream=RandomStream(np.random.default_rng(service_seed)))
    clock = AgeClock(0, 0)
    total = 0
    for t in range(slots):
        if arrivals.uniform() < p:
            facility_enqueue(facility, Measurement(None, t))
        _, done = facility_step(facility)
        age_tick(clock, done, t + 1)
        total += clock.age
    return total / slots


def bernoulli_arrival_age_curve(
    q: float, p_grid: Sequence[float], slots: int, seed: int = 0
) -> list[tuple[float, float]]:
    """(utilization, average age in slots) for each arrival probability in ``p_grid``."""
    bad = [p for p in p_grid if not 0.0 < p <= q]
    if bad:
        raise ValueError(f"arrival probabilities must lie in (0, q={q}]: {bad}")
    seeds = np.random.SeedSequence(seed).generate_state(len(p_grid))
    return [
        (p / q, bernoulli_average_age(q, p, slots, int(s)))
        for p, s in zip(p_grid, seeds)
    ]


def utilization_grid(q: float, utilizations: Sequence[float]) -> list[float]:
    return [u * q for u in utilizations]
