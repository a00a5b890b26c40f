"""Replaying recorded cellular delivery schedules.

A trace file lists one millisecond timestamp per line; each line is one
chance to move 1500 bytes across the link in that millisecond. Repeated
timestamps mean several such chances. Opportunities that find the link idle
are lost, and the schedule repeats with a period equal to its last timestamp.

Two agents exchange packets with a first-come-first-served responder in the
cloud over their own uplink and downlink. Every decision period each agent
uploads a 1024-byte measurement of its own source carrying its query flag;
the responder answers queries with the freshest measurement it holds of the
source the querying agent tracks (agents track each other's source).
"""

from __future__ import annotations

import csv
import heapq
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from edgequery.sim.episode import DecisionView, _std, episode_streams
from edgequery.sim.source import RandomStream, SourceParams, initial_state, source_step
from edgequery import units
from edgequery.units import slots_to_seconds

log = logging.getLogger(__name__)

MTU_BYTES = 1500
PACKET_BYTES = 1024


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TraceSchedule:
    timestamps: np.ndarray
    name: str = ""

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if ts.size == 0:
            raise TraceFormatError("trace has no delivery opportunities")
        if np.any(ts < 0):
            raise TraceFormatError("negative timestamp")
        if np.any(np.diff(ts) < 0):
            raise TraceFormatError("timestamps decrease")
        if ts[-1] <= 0:
            raise TraceFormatError("last timestamp must be positive (it sets the repeat period)")
        object.__setattr__(self, "timestamps", ts)

    @property
    def period(self) -> int:
        return int(self.timestamps[-1])

    @property
    def duration_ms(self) -> int:
        return self.period

    def __len__(self) -> int:
        return len(self.timestamps)

    def capacities(self) -> dict[int, int]:
        """Bytes deliverable in each listed millisecond (one repeat of the trace)."""
        values, counts = np.unique(self.timestamps, return_counts=True)
        return {int(v): int(c) * MTU_BYTES for v, c in zip(values, counts)}

    def opportunity_time(self, k: int) -> int:
        m = len(self.timestamps)
        return int(self.timestamps[k % m]) + (k // m) * self.period

    def first_opportunity_at_or_after(self, t_ms: int) -> int:
        m = len(self.timestamps)
        cycle, offset = divmod(int(t_ms), self.period)
        j = int(np.searchsorted(self.timestamps, offset, side="left"))
        return cycle * m + j

    def opportunities_until(self, t_ms: int) -> int:
        """Number of opportunities with time <= t_ms."""
        m = len(self.timestamps)
        cycle, offset = divmod(int(t_ms), self.period)
        return cycle * m + int(np.searchsorted(self.timestamps, offset, side="right"))


def parse_trace(path) -> TraceSchedule:
    lines = Path(path).read_text().splitlines()
    values = []
    for i, line in enumerate(lines, 1):
        s = line.strip()
        if not s:
            continue
        try:
            values.append(int(s))
        except ValueError:
            raise TraceFormatError(f"{path}:{i}: not an integer: {s!r}") from None
    if not values:
        raise TraceFormatError(f"{path}: empty trace")
    try:
        return TraceSchedule(np.array(values), Path(path).name)
    except TraceFormatError as e:
        raise TraceFormatError(f"{path}: {e}") from None


def write_trace(path, timestamps) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{int(t)}\n" for t in timestamps))
    return path


class EmulatedLink:
    """Byte FIFO drained by the trace's delivery opportunities.

    Delivery times are worked out when a packet is sent: the packet's bytes
    follow everything already queued, and it is delivered in the millisecond
    of the opportunity that carries its last byte. Bytes left over in an
    opportunity go to the next queued packet only if that packet is already
    waiting in that millisecond; otherwise they are lost.
    """

    def __init__(self, schedule: TraceSchedule, keep_log: bool = False):
        self.schedule = schedule
        self._k = 0
        self._spare = MTU_BYTES
        self.keep_log = keep_log
        self.usage: dict[int, int] = {}
        self.deliveries: list[tuple[int, int, int]] = []

    def send(self, nbytes: int, now_ms: int) -> int:
        if nbytes <= 0:
            raise ValueError("packet size must be positive")
        sched = self.schedule
        k_now = sched.first_opportunity_at_or_after(now_ms)
        if self._k < k_now:
            self._k, self._spare = k_now, MTU_BYTES
        remaining = int(nbytes)
        while True:
            used = min(self._spare, remaining)
            remaining -= used
            self._spare -= used
            t = sched.opportunity_time(self._k)
            if self.keep_log and used:
                self.usage[t] = self.usage.get(t, 0) + used
            if self._spare == 0:
                self._k, self._spare = self._k + 1, MTU_BYTES
            if remaining == 0:
                if self.keep_log:
                    self.deliveries.append((int(now_ms), t, int(nbytes)))
                return t


def link_send(link: EmulatedLink, nbytes: int, now_ms: int) -> int:
    return link.send(nbytes, now_ms)


@dataclass
class LinkAssignment:
    uplinks: list[TraceSchedule]
    downlinks: list[TraceSchedule]
    category: str = "not-stationary"

    def __post_init__(self):
        if len(self.uplinks) != len(self.downlinks) or len(self.uplinks) < 2:
            raise ValueError("need one uplink and one downlink per agent, at least two agents")

    @property
    def n_agents(self) -> int:
        return len(self.uplinks)

    def trace_ids(self) -> list[str]:
        return [t.name for t in self.uplinks] + [t.name for t in self.downlinks]


def assign_traces(pool: Sequence[TraceSchedule], seed: int, category: str = "not-stationary",
                  n_agents: int = 2) -> LinkAssignment:
    """Draw 2 traces per agent from ``pool`` at random without replacement."""
    need = 2 * n_agents
    if len(pool) < need:
        raise ValueError(f"need at least {need} traces, got {len(pool)}")
    idx = np.random.default_rng(seed).choice(len(pool), size=need, replace=False)
    picked = [pool[i] for i in idx]
    return LinkAssignment(picked[:n_agents], picked[n_agents:], category)


class CloudResponder:
    """Keeps the freshest measurement per source and answers queries in arrival order."""

    def __init__(self, initial: dict[int, tuple[np.ndarray, int]]):
        self.store = {k: (np.array(v[0]), int(v[1])) for k, v in initial.items()}
        self.answered: list[int] = []

    def receive(self, source: int, state, generated_at: int) -> None:
        if source not in self.store or generated_at > self.store[source][1]:
            self.store[source] = (np.array(state), int(generated_at))

    def respond(self, query_id: int, source: int) -> tuple[np.ndarray, int]:
        self.answered.append(query_id)
        state, gen = self.store[source]
        return state.copy(), gen


@dataclass
class AgentStats:
    agent: int
    policy: str
    avg_age_slots: float
    avg_err: float
    query_rate: float
    mean_rtt_s: float
    per: float
    queries: int
    responses: int
    rtts_s: list[float] = field(default_factory=list)
    response_ids: list[int] = field(default_factory=list)
    full_state_mse: float = 0.0
    err_std: float = 0.0

    @property
    def avg_age_seconds(self) -> float:
        return slots_to_seconds(self.avg_age_slots)


@dataclass
class ExperimentStats:
    agents: list[AgentStats]
    trace_ids: list[str]
    seed: int
    duration_s: float

    CSV_FIELDS = ("agent", "policy", "trace_ids", "seed", "avg_age_s", "avg_err", "query_rate",
                  "mean_rtt_s", "per", "queries", "responses")

    def rows(self) -> list[dict]:
        return [
            {
                "agent": a.agent,
                "policy": a.policy,
                "trace_ids": "|".join(self.trace_ids),
                "seed": self.seed,
                "avg_age_s": a.avg_age_seconds,
                "avg_err": a.avg_err,
                "query_rate": a.query_rate,
                "mean_rtt_s": a.mean_rtt_s,
                "per": a.per,
                "queries": a.queries,
                "responses": a.responses,
            }
            for a in self.agents
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            w.writeheader()
            for row in self.rows():
                w.writerow(row)


@dataclass
class TraceExperimentConfig:
    duration_s: float = 120.0
    decision_ms: int = field(default_factory=lambda: int(round(units.SLOT_SECONDS * 1000)))
    base_delay_ms: int = 10
    packet_bytes: int = PACKET_BYTES
    response_bytes: int = PACKET_BYTES
    warmup_slots: int = 100
    source: SourceParams = field(default_factory=SourceParams)


def _source_trajectories(n: int, slots: int, seed: int, params: SourceParams) -> np.ndarray:
    out = np.empty((n, slots + 1, 4))
    for i in range(n):
        stream = episode_streams(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))["source"]
        s = initial_state(stream, params)
        out[i, 0] = s
        for k in range(slots):
            a = np.array([stream.truncated_normal(params.acceleration_std, params.acceleration_bound)
                          for _ in range(2)])
            s = source_step(s, params=params, acceleration=a)
            out[i, k + 1] = s
    return out


def run_trace_experiment(
    assignment: LinkAssignment,
    policies: Sequence,
    cfg: TraceExperimentConfig | None = None,
    seed: int = 0,
    policy_names: Sequence[str] | None = None,
) -> ExperimentStats:
    """Drive the agents against one responder over the assigned links."""
    cfg = cfg or TraceExperimentConfig()
    n = assignment.n_agents
    if len(policies) != n:
        raise ValueError(f"need {n} policies, got {len(policies)}")
    names = list(policy_names or [getattr(p, "kind", type(p).__name__) for p in policies])
    slots = int(round(cfg.duration_s * 1000 / cfg.decision_ms))
    horizon_ms = slots * cfg.decision_ms
    for sched in assignment.uplinks + assignment.downlinks:
        if sched.period < horizon_ms:
            warnings.warn(f"trace {sched.name or '<unnamed>'} ({sched.period} ms) is shorter than the "
                          f"experiment ({horizon_ms} ms); it will wrap", stacklevel=2)
    target = [(i + 1) % n for i in range(n)]
    traj = _source_trajectories(n, slots, seed, cfg.source)
    up = [EmulatedLink(s) for s in assignment.uplinks]
    down = [EmulatedLink(s) for s in assignment.downlinks]
    cloud = CloudResponder({j: (traj[j, 0], 0) for j in range(n)})
    for i, p in enumerate(policies):
        ss = np.random.SeedSequence([seed, 1000 + i])
        p.reset([RandomStream(np.random.default_rng(ss))])

    latest = [traj[target[i], 0].copy() for i in range(n)]
    freshest = [0] * n
    fresh_since_last = [False] * n
    query_sent: list[dict[int, int]] = [dict() for _ in range(n)]
    rtts: list[list[float]] = [[] for _ in range(n)]
    response_ids: list[list[int]] = [[] for _ in range(n)]
    counted = max(slots - cfg.warmup_slots, 1) if cfg.warmup_slots < slots else slots
    first_counted = slots - counted
    age_sum = np.zeros(n)
    err_sum = np.zeros(n)
    sq_sum = np.zeros(n)
    err_sq_sum = np.zeros(n)
    q_sum = np.zeros(n)
    events: list = []
    seq = 0
    next_query = 0

    def push(t, prio, kind, payload):
        nonlocal seq
        heapq.heappush(events, (t, prio, seq, kind, payload))
        seq += 1

    # within one millisecond: store arriving measurements, then answer queries
    # (in arrival order), then hand responses to agents, then decide
    for k in range(slots):
        for i in range(n):
            push(k * cfg.decision_ms, 3, "decide", (i, k))
    while events:
        t, _, _, kind, payload = heapq.heappop(events)
        if kind == "decide":
            i, k = payload
            age = k - freshest[i]
            est = np.atleast_2d(policies[i].estimate(latest[i][None], np.array([float(age)])))[0]
            truth = traj[target[i], k]
            view = DecisionView(k, est[None], np.array([float(age)]), latest[i][None], truth[None],
                                np.array([fresh_since_last[i]]))
            action = int(np.asarray(policies[i].act(view)).reshape(-1)[0])
            fresh_since_last[i] = False
            if k >= first_counted:
                d = est - truth
                age_sum[i] += age
                e = float(np.hypot(d[0], d[1]))
                err_sum[i] += e
                err_sq_sum[i] += e * e
                sq_sum[i] += float(d @ d)
                q_sum[i] += action
            qid = -1
            if action:
                qid = next_query
                next_query += 1
                query_sent[i][qid] = t
            arrive = up[i].send(cfg.packet_bytes, t + cfg.base_delay_ms)
            push(arrive, 0, "cloud", (i, traj[i, k].copy(), k, qid))
        elif kind == "cloud":
            if t >= horizon_ms:
                continue
            i, state, gen, qid = payload
            cloud.receive(i, state, gen)
            if qid >= 0:
                push(t, 1, "answer", (i, qid))
        elif kind == "answer":
            i, qid = payload
            m_state, m_gen = cloud.respond(qid, target[i])
            arrive = down[i].send(cfg.response_bytes, t + cfg.base_delay_ms)
            push(arrive, 2, "recv", (i, m_state, m_gen, qid))
        elif kind == "recv":
            i, state, gen, qid = payload
            if t >= horizon_ms:
                continue
            sent = query_sent[i].pop(qid)
            rtts[i].append((t - sent) / 1000.0)
            response_ids[i].append(qid)
            if gen > freshest[i]:
                freshest[i] = gen
                latest[i] = state
                fresh_since_last[i] = True

    agents = []
    for i in range(n):
        total_q = len(rtts[i]) + len(query_sent[i])
        agents.append(
            AgentStats(
                agent=i,
                policy=names[i],
                avg_age_slots=float(age_sum[i] / counted),
                avg_err=float(err_sum[i] / counted),
                query_rate=float(q_sum[i] / counted),
                mean_rtt_s=float(np.mean(rtts[i])) if rtts[i] else float("nan"),
                per=float(len(query_sent[i]) / total_q) if total_q else 0.0,
                queries=total_q,
                responses=len(rtts[i]),
                rtts_s=rtts[i],
                response_ids=response_ids[i],
                full_state_mse=float(sq_sum[i] / counted),
                err_std=_std(err_sum[i], err_sq_sum[i], counted),
            )
        )
    return ExperimentStats(agents, assignment.trace_ids(), seed, slots * cfg.decision_ms / 1000.0)


def measure_brtt(assignment: LinkAssignment, cfg: TraceExperimentConfig | None = None, seed: int = 0) -> list[float]:
    """RTTs in seconds of probes sent every decision period by every agent.

    Probing traffic is exactly always-query traffic. Probes still unanswered
    when the run ends are reported as ``inf``.
    """
    from edgequery.policies import AlwaysQuery

    stats = run_trace_experiment(assignment, [AlwaysQuery() for _ in range(assignment.n_agents)], cfg, seed)
    out: list[float] = []
    for a in stats.agents:
        out.extend(a.rtts_s)
        out.extend([float("inf")] * (a.queries - a.responses))
    return out


def classify_brtt(assignment: LinkAssignment | None = None, threshold_s: float = 0.2, cfg=None, seed: int = 0,
                  rtts: Sequence[float] | None = None) -> str:
    """'high' when the median probe RTT is at least ``threshold_s``, else 'low'."""
    if rtts is None:
        if assignment is None:
            raise ValueError("need an assignment or measured RTTs")
        rtts = measure_brtt(assignment, cfg, seed)
    if len(rtts) == 0:
        return "high"
    return "high" if float(np.median(rtts)) >= threshold_s else "low"


# synthetic traces --------------------------------------------------------------


def constant_rate_trace(duration_ms: int, every_ms: int = 1, per_slot: int = 1, offset: int = 0) -> np.ndarray:
    """``per_slot`` opportunities every ``every_ms`` milliseconds."""
    times = np.arange(offset, duration_ms + 1, every_ms)
    if times[-1] != duration_ms:
        times = np.append(times, duration_ms)
    return np.repeat(times, per_slot)


def random_trace(duration_ms: int, mean_bytes_per_ms: float, seed: int, burstiness: float = 0.0) -> np.ndarray:
    """Poisson opportunities at a rate giving ``mean_bytes_per_ms`` on average.

    With ``burstiness`` > 0 the rate is modulated by a slowly varying
    two-state on/off process (on fraction 1 - burstiness/2).
    """
    rng = np.random.default_rng(seed)
    lam = mean_bytes_per_ms / MTU_BYTES
    rate = np.full(duration_ms + 1, lam)
    if burstiness > 0:
        state, t = 1, 0
        while t <= duration_ms:
            length = int(rng.exponential(2000)) + 1
            if state == 0:
                rate[t : t + length] = lam * (1 - burstiness)
            else:
                rate[t : t + length] = lam * (1 + burstiness)
            state ^= 1
            t += length
    counts = rng.poisson(rate)
    counts[-1] = max(counts[-1], 1)
    return np.repeat(np.arange(duration_ms + 1), counts)


SYNTHETIC_KINDS = {
    # mean bytes/ms, burstiness
    "constrained": (25.0, 0.6),
    "ample": (200.0, 0.0),
}


def synthetic_trace_pool(kind: str, n: int, duration_ms: int, seed: int = 0) -> list[TraceSchedule]:
    """``n`` random schedules of one capacity class; see ``SYNTHETIC_KINDS``."""
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic trace kind {kind!r}; choose from {sorted(SYNTHETIC_KINDS)}")
    rate, burst = SYNTHETIC_KINDS[kind]
    seeds = np.random.SeedSequence([seed, len(kind)]).generate_state(n)
    return [TraceSchedule(random_trace(duration_ms, rate, int(s), burst), f"{kind}-{seed}-{i}")
            for i, s in enumerate(seeds)]


def download_public_traces(dest) -> None:
    """Public cellular traces are not bundled and cannot be fetched here.

    Place them under ``dest`` as ``<dest>/<category>/<name>.up`` and
    ``<dest>/<category>/<name>.down`` (category is ``stationary`` or
    ``not-stationary``), one millisecond timestamp per line.
    """
    raise NotImplementedError(
        "fetching public traces is not automated; copy trace files into "
        f"{dest}/<category>/<name>.up|.down (one integer millisecond per line)"
    )


def load_trace_pool(directory) -> dict[str, list[TraceSchedule]]:
    """Traces under ``directory/<category>/*``, grouped by category."""
    out: dict[str, list[TraceSchedule]] = {}
    for sub in sorted(Path(directory).iterdir()):
        if sub.is_dir():
            out[sub.name] = [parse_trace(p) for p in sorted(sub.iterdir()) if p.is_file()]
    return out
