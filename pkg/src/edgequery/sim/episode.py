"""Episode runner: source, facility, age clock and a querying policy in lockstep.

Several independent episodes are stepped together so batched policies
(neural ones in particular) evaluate one matrix product per slot instead of
one per episode. Each episode owns its random streams, so its trajectory does
not depend on which other episodes share the batch.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from edgequery.sac.returns import reward
from edgequery.sim.age import AgeClock, age_tick
from edgequery.sim.facility import FacilityState, Measurement, facility_enqueue, facility_step
from edgequery.sim.source import RandomStream, SourceParams, initial_state, source_step


@dataclass
class EpisodeConfig:
    q_range: tuple[float, float] = (0.05, 1.0)
    episode_length: int = 2000
    gamma: float = 0.99
    seed: int = 0
    source: SourceParams = field(default_factory=SourceParams)
    warmup: int = 100

    def __post_init__(self):
        low, high = self.q_range
        if not 0.0 < low < high <= 1.0:
            raise ValueError(f"q_range must satisfy 0 < low < high <= 1, got {self.q_range}")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        self.q_range = (float(low), float(high))

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        source = SourceParams(**d.pop("source", {}))
        if "q_range" in d:
            d["q_range"] = tuple(d["q_range"])
        return cls(source=source, **d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["q_range"] = list(self.q_range)
        return out


@dataclass
class EpisodeStats:
    seed: int
    q: float
    avg_age_slots: float
    avg_err: float
    query_rate: float
    full_state_mse: float = 0.0
    mean_reward: float = 0.0
    final_age: int = 0
    deliveries: int = 0
    err_std: float = 0.0

    CSV_FIELDS = ("seed", "q", "avg_age_slots", "avg_err", "query_rate")


def write_stats_csv(path, stats: Sequence[EpisodeStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EpisodeStats.CSV_FIELDS)
        for s in stats:
            w.writerow([s.seed, repr(s.q), repr(s.avg_age_slots), repr(s.avg_err), repr(s.query_rate)])


@dataclass
class DecisionView:
    """What a policy may look at in one slot (arrays are per episode in the batch).

    ``truth`` is ground truth and only the error-oracle baselines read it.
    """

    slot: int
    estimate: np.ndarray
    age: np.ndarray
    latest: np.ndarray
    truth: np.ndarray
    delivered: np.ndarray


class QueryPolicy(Protocol):
    def reset(self, streams: Sequence[RandomStream]) -> None: ...

    def estimate(self, latest: np.ndarray, age: np.ndarray) -> np.ndarray: ...

    def act(self, view: DecisionView) -> np.ndarray: ...


class TransitionSink(Protocol):
    def record(self, obs, actions, rewards, next_obs, done: bool) -> None: ...


def episode_streams(seed: int) -> dict[str, RandomStream]:
    children = np.random.SeedSequence(seed).spawn(4)
    return {
        name: RandomStream(np.random.default_rng(child))
        for name, child in zip(("q", "source", "facility", "policy"), children)
    }


def draw_q(cfg: EpisodeConfig, stream: RandomStream) -> float:
    low, high = cfg.q_range
    return low + (high - low) * stream.uniform()


class EpisodeBatch:
    """State of several episodes advanced slot by slot."""

    def __init__(self, cfg: EpisodeConfig, seeds: Sequence[int], qs: Sequence[float] | None = None):
        self.cfg = cfg
        self.seeds = list(seeds)
        streams = [episode_streams(s) for s in self.seeds]
        if qs is None:
            qs = [draw_q(cfg, st["q"]) for st in streams]
        self.qs = [float(q) for q in qs]
        self.source_streams = [st["source"] for st in streams]
        self.policy_streams = [st["policy"] for st in streams]
        self.facilities = [
            FacilityState(q, stream=st["facility"]) for q, st in zip(self.qs, streams)
        ]
        self.truth = np.stack([initial_state(s, cfg.source) for s in self.source_streams])
        # the agent starts with a measurement of the true initial state, age 0
        self.latest = self.truth.copy()
        self.clocks = [AgeClock(0, 0) for _ in self.seeds]
        self.slot = 0
        self.delivered = np.zeros(len(self.seeds), dtype=bool)

    def __len__(self) -> int:
        return len(self.seeds)

    @property
    def ages(self) -> np.ndarray:
        return np.array([c.age for c in self.clocks], dtype=np.float64)

    def advance(self, actions: np.ndarray) -> None:
        """Apply one slot of actions: enqueue, serve, tick ages, move sources."""
        now = self.slot
        for i, f in enumerate(self.facilities):
            if actions[i]:
                facility_enqueue(f, Measurement(self.truth[i].copy(), now))
            _, done = facility_step(f)
            clock = self.clocks[i]
            before = clock.freshest_generation_time
            age_tick(clock, done, now + 1)
            self.delivered[i] = done is not None
            if clock.freshest_generation_time != before:
                self.latest[i] = done.state
        params = self.cfg.source
        accel = np.empty((len(self), 2))
        for i, s in enumerate(self.source_streams):
            accel[i, 0] = s.truncated_normal(params.acceleration_std, params.acceleration_bound)
            accel[i, 1] = s.truncated_normal(params.acceleration_std, params.acceleration_bound)
        self.truth = source_step(self.truth, params=params, acceleration=accel)
        self.slot = now + 1


def _std(total: float, total_sq: float, count: int) -> float:
    mean = total / count
    return float(np.sqrt(max(total_sq / count - mean * mean, 0.0)))


def run_episodes(
    cfg: EpisodeConfig,
    policy: QueryPolicy,
    seeds: Sequence[int],
    qs: Sequence[float] | None = None,
    sink: TransitionSink | None = None,
) -> list[EpisodeStats]:
    """Run one episode per seed in lockstep and return per-episode averages.

    The reward for the action at slot t is computed from the estimate at
    slot t+1. With a sink attached, the policy must expose ``observation()``
    and every slot's transitions are recorded; the last slot of an episode is
    recorded with ``done=True``.
    """
    batch = EpisodeBatch(cfg, seeds, qs)
    n, length = len(batch), cfg.episode_length
    policy.reset(batch.policy_streams)
    warmup = cfg.warmup if cfg.warmup < length else 0
    counted = length - warmup
    age_sum = np.zeros(n)
    err_sum = np.zeros(n)
    sq_sum = np.zeros(n)
    err_sq_sum = np.zeros(n)
    act_sum = np.zeros(n)
    rew_sum = np.zeros(n)
    deliveries = np.zeros(n, dtype=int)
    prev_obs = prev_act = None
    for t in range(length + 1):
        ages = batch.ages
        est = policy.estimate(batch.latest, ages)
        diff = est - batch.truth
        sq = np.einsum("ij,ij->i", diff, diff)
        if t > 0:
            r = reward(sq)
            if t > warmup:
                rew_sum += r
            if sink is not None:
                obs = policy.observation()
                sink.record(prev_obs, prev_act, r, obs, t == length)
                prev_obs = obs
        elif sink is not None:
            prev_obs = policy.observation()
        if t == length:
            break
        view = DecisionView(t, est, ages, batch.latest, batch.truth, batch.delivered.copy())
        actions = np.asarray(policy.act(view), dtype=np.int64)
        if t >= warmup:
            age_sum += ages
            pos_err = np.linalg.norm(diff[:, :2], axis=1)
            err_sum += pos_err
            err_sq_sum += pos_err**2
            sq_sum += sq
            act_sum += actions
        batch.advance(actions)
        deliveries += batch.delivered
        prev_act = actions
    return [
        EpisodeStats(
            seed=batch.seeds[i],
            q=batch.qs[i],
            avg_age_slots=float(age_sum[i] / counted),
            avg_err=float(err_sum[i] / counted),
            query_rate=float(act_sum[i] / counted),
            full_state_mse=float(sq_sum[i] / counted),
            mean_reward=float(rew_sum[i] / counted),
            final_age=batch.clocks[i].age,
            deliveries=int(deliveries[i]),
            err_std=_std(err_sum[i], err_sq_sum[i], counted),
        )
        for i in range(n)
    ]


def run_episode(cfg: EpisodeConfig, policy: QueryPolicy, sink: TransitionSink | None = None,
                q: float | None = None) -> EpisodeStats:
    return run_episodes(cfg, policy, [cfg.seed], None if q is None else [q], sink)[0]
