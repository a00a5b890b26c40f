"""Source, service facility and age clock simulation."""

from edgequery.sim.age import AgeClock, age_tick
from edgequery.sim.agecurve import bernoulli_arrival_age_curve, bernoulli_average_age
from edgequery.sim.episode import (
    DecisionView,
    EpisodeBatch,
    EpisodeConfig,
    EpisodeStats,
    run_episode,
    run_episodes,
    write_stats_csv,
)
from edgequery.sim.facility import FacilityState, Measurement, facility_enqueue, facility_step
from edgequery.sim.source import RandomStream, SourceParams, initial_state, source_step

__all__ = [
    "AgeClock",
    "DecisionView",
    "EpisodeBatch",
    "EpisodeConfig",
    "EpisodeStats",
    "FacilityState",
    "Measurement",
    "RandomStream",
    "SourceParams",
    "age_tick",
    "bernoulli_arrival_age_curve",
    "bernoulli_average_age",
    "facility_enqueue",
    "facility_step",
    "initial_state",
    "run_episode",
    "run_episodes",
    "source_step",
    "write_stats_csv",
]
