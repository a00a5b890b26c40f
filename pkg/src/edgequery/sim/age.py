"""Age of the freshest source measurement held by the agent."""

from __future__ import annotations

from dataclasses import dataclass

from edgequery.sim.facility import Measurement


@dataclass
class AgeClock:
    age: int = 0
    freshest_generation_time: int | None = None


def age_tick(clock: AgeClock, delivered: Measurement | None, now: int) -> AgeClock:
    """Advance the clock to slot ``now``.

    A delivery no fresher than what the agent already holds counts as no delivery.
    """
    if delivered is not None:
        if delivered.generated_at > now:
            raise ValueError(f"measurement generated at {delivered.generated_at} delivered at {now}")
        fresher = (
            clock.freshest_generation_time is None
            or delivered.generated_at > clock.freshest_generation_time
        )
        if fresher:
            clock.freshest_generation_time = delivered.generated_at
            clock.age = now - delivered.generated_at
            return clock
    clock.age += 1
    return clock
