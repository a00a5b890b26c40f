"""Recurrent state estimator.

Each slot the network reads the previous estimate, the scaled age and the
most recent received measurement, and returns the new state estimate.

In the default *anchored* mode positions are expressed relative to the most
recent measurement before entering the network, and the output head predicts
the correction to that measurement. A zero head therefore reproduces the
zero-order hold (estimate = latest measurement). In absolute mode the head
output is the estimate itself.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from edgequery.nn import Dense, LSTMCell, Module, ParameterSet, Tensor, adam_step, backprop, concat
from edgequery.sim.episode import EpisodeBatch, EpisodeConfig
from edgequery.sim.source import STATE_DIM

log = logging.getLogger(__name__)

INPUT_DIM = 2 * STATE_DIM + 1


@dataclass
class EstimatorConfig:
    hidden_size: int = 64
    fc_size: int = 64
    anchored: bool = True
    age_scale: float = 100.0
    state_scale: float = 10.0
    lr: float = 1e-4
    bptt: int = 64
    clip_norm: float = 10.0
    seed: int = 0


@dataclass
class EstimatorInput:
    prev_estimate: np.ndarray
    age: float | np.ndarray
    latest_measurement: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.age) < 0):
            raise ValueError("age must be non-negative")
        for v in (self.prev_estimate, self.age, self.latest_measurement):
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite estimator input")


class EstimatorModel(Module):
    def __init__(self, config: EstimatorConfig | None = None, rng=None):
        self.config = config or EstimatorConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cell = LSTMCell(INPUT_DIM, cfg.hidden_size, rng)
        self.fc1 = Dense(cfg.hidden_size, cfg.fc_size, "relu", rng)
        self.fc2 = Dense(cfg.fc_size, cfg.fc_size, "relu", rng)
        self.head = Dense(cfg.fc_size, STATE_DIM, "identity", rng).zero_()
        self.h = self.c = self.prev = None

    # recurrent state ------------------------------------------------------

    def reset(self, initial_estimate: np.ndarray) -> None:
        """Start new episodes; ``initial_estimate`` is (batch, 4)."""
        initial_estimate = np.atleast_2d(np.asarray(initial_estimate, dtype=np.float64))
        self.h, self.c = self.cell.zero_state(len(initial_estimate))
        self.prev = initial_estimate.copy()

    def state(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.h.copy(), self.c.copy(), self.prev.copy()

    # forward --------------------------------------------------------------

    def _frame_offset(self, latest: np.ndarray) -> np.ndarray:
        offset = np.zeros_like(latest)
        if self.config.anchored:
            offset[..., :2] = latest[..., :2]
        return offset

    def features(self, prev, age, latest: np.ndarray):
        """Network input for one slot; ``prev`` may be a Tensor (training unroll)."""
        cfg = self.config
        offset = self._frame_offset(latest)
        age_col = (np.asarray(age, dtype=np.float64) / cfg.age_scale).reshape(-1, 1)
        prev_part = (prev - offset) / cfg.state_scale if isinstance(prev, Tensor) else Tensor(
            (prev - offset) / cfg.state_scale
        )
        return concat([prev_part, Tensor(age_col), Tensor((latest - offset) / cfg.state_scale)], axis=-1)

    def forward(self, prev, age, latest: np.ndarray, h, c):
        x = self.features(prev, age, latest)
        h, c = self.cell(x, h, c)
        out = self.head(self.fc2(self.fc1(h))) * self.config.state_scale
        base = latest if self.config.anchored else np.zeros_like(latest)
        return out + base, h, c

    def step(self, latest: np.ndarray, age: np.ndarray) -> np.ndarray:
        """Closed-loop rollout step: feeds back the previous own estimate."""
        latest = np.atleast_2d(latest)
        age = np.atleast_1d(np.asarray(age, dtype=np.float64))
        if not (np.all(np.isfinite(latest)) and np.all(np.isfinite(age))):
            raise ValueError("non-finite estimator input")
        est, h, c = self.forward(self.prev, age, latest, self.h, self.c)
        self.h, self.c, self.prev = h.data, c.data, est.data
        return est.data.copy()


def estimate(model: EstimatorModel, inp: EstimatorInput) -> np.ndarray:
    """Estimate for one slot from an explicit input; advances the recurrent state."""
    single = np.ndim(inp.latest_measurement) == 1
    latest = np.atleast_2d(inp.latest_measurement).astype(np.float64)
    prev = np.atleast_2d(inp.prev_estimate).astype(np.float64)
    age = np.atleast_1d(np.asarray(inp.age, dtype=np.float64))
    if model.h is None or model.h.shape[0] != len(latest):
        model.reset(prev)
    est, h, c = model.forward(prev, age, latest, model.h, model.c)
    model.h, model.c, model.prev = h.data, c.data, est.data
    return est.data[0].copy() if single else est.data.copy()


# training -------------------------------------------------------------------


@dataclass
class SequenceBatch:
    """Aligned windows: ages (B, T), latest and truth (B, T, 4), plus the
    recurrent state and previous estimate at the window start."""

    ages: np.ndarray
    latest: np.ndarray
    truth: np.ndarray
    h0: np.ndarray | None = None
    c0: np.ndarray | None = None
    prev0: np.ndarray | None = None


def make_estimator_params(model: EstimatorModel) -> ParameterSet:
    return ParameterSet.from_module(model)


def sequence_loss(model: EstimatorModel, batch: SequenceBatch):
    """Mean squared error over the unrolled window; returns (loss, final h, c, estimate)."""
    n, steps = batch.ages.shape
    h = batch.h0 if batch.h0 is not None else np.zeros((n, model.config.hidden_size))
    c = batch.c0 if batch.c0 is not None else np.zeros((n, model.config.hidden_size))
    prev = batch.prev0 if batch.prev0 is not None else batch.latest[:, 0]
    h, c, prev = Tensor(h), Tensor(c), Tensor(prev)
    total = None
    for t in range(steps):
        est, h, c = model.forward(prev, batch.ages[:, t], batch.latest[:, t], h, c)
        diff = est - batch.truth[:, t]
        term = (diff * diff).sum()
        total = term if total is None else total + term
        prev = est
    loss = total / float(n * steps * STATE_DIM)
    return loss, h.data, c.data, prev.data


def estimator_train_step(
    model: EstimatorModel, params: ParameterSet, batch: SequenceBatch, return_state: bool = False
):
    """One Adam update on the window MSE; returns the loss before the update.

    With ``return_state`` also returns the (h, c, estimate) reached at the end
    of the window, for carrying into the next window.
    """
    loss, h, c, prev = sequence_loss(model, batch)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite estimator loss")
    grads = backprop(loss, params.tensors)
    adam_step(params, grads, model.config.lr, clip_norm=model.config.clip_norm)
    if return_state:
        return float(loss.data), (h, c, prev)
    return float(loss.data)


def train_on_rollouts(model, params, rollouts: "Rollouts", bptt: int | None = None) -> list[float]:
    """Truncated BPTT through whole episodes, carrying state between windows."""
    bptt = bptt or model.config.bptt
    n, length = rollouts.ages.shape
    h, c = model.cell.zero_state(n)
    prev = rollouts.latest[:, 0].copy()
    losses = []
    for start in range(0, length, bptt):
        sl = slice(start, start + bptt)
        batch = SequenceBatch(rollouts.ages[:, sl], rollouts.latest[:, sl], rollouts.truth[:, sl], h, c, prev)
        loss, (h, c, prev) = estimator_train_step(model, params, batch, return_state=True)
        losses.append(loss)
    return losses


@dataclass
class Rollouts:
    ages: np.ndarray
    latest: np.ndarray
    truth: np.ndarray
    actions: np.ndarray
    qs: list[float]


def record_bernoulli_rollouts(
    cfg: EpisodeConfig, seeds, qs, query_probs, length: int | None = None
) -> Rollouts:
    """Episodes under i.i.d. Bernoulli querying; the estimator plays no part."""
    length = length or cfg.episode_length
    batch = EpisodeBatch(cfg, seeds, qs)
    n = len(batch)
    probs = np.asarray(query_probs, dtype=np.float64)
    ages = np.empty((n, length))
    latest = np.empty((n, length, STATE_DIM))
    truth = np.empty((n, length, STATE_DIM))
    actions = np.empty((n, length), dtype=np.int64)
    for t in range(length):
        ages[:, t] = batch.ages
        latest[:, t] = batch.latest
        truth[:, t] = batch.truth
        a = np.array([s.uniform() < p for s, p in zip(batch.policy_streams, probs)], dtype=np.int64)
        actions[:, t] = a
        batch.advance(a)
    return Rollouts(ages, latest, truth, actions, batch.qs)


@dataclass
class PretrainConfig:
    episodes_per_round: int = 16
    episode_length: int = 512
    updates: int = 2000
    seed: int = 0
    q_range: tuple[float, float] = (1e-3, 1.0)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)


@dataclass
class PretrainReport:
    losses: list[float]
    qs: list[float]
    queries: list[int]
    slots: int


def pretrain(
    cfg: PretrainConfig,
    model: EstimatorModel | None = None,
    params: ParameterSet | None = None,
) -> tuple[EstimatorModel, PretrainReport]:
    """Warm-start the estimator: query w.p. q/2 with q ~ U(0, 1) per episode.

    Only estimator weights are touched.
    """
    model = model or EstimatorModel()
    params = params or make_estimator_params(model)
    ep_cfg = EpisodeConfig(**{**asdict(cfg.episode), "source": cfg.episode.source,
                              "q_range": cfg.q_range, "episode_length": cfg.episode_length})
    seeds = np.random.SeedSequence(cfg.seed).generate_state(10**6 // cfg.episodes_per_round + 1)
    report = PretrainReport([], [], [], cfg.episode_length)
    windows = max(1, cfg.episode_length // model.config.bptt)
    round_idx = 0
    while len(report.losses) < cfg.updates:
        base = int(seeds[round_idx]) * 1000
        ep_seeds = [base + i for i in range(cfg.episodes_per_round)]
        batch = EpisodeBatch(ep_cfg, ep_seeds)
        qs = batch.qs
        rollouts = record_bernoulli_rollouts(ep_cfg, ep_seeds, qs, [q / 2 for q in qs])
        report.qs.extend(qs)
        report.queries.extend(int(a) for a in rollouts.actions.sum(axis=1))
        remaining = cfg.updates - len(report.losses)
        if remaining < windows:
            cut = remaining * model.config.bptt
            rollouts = Rollouts(rollouts.ages[:, :cut], rollouts.latest[:, :cut], rollouts.truth[:, :cut],
                                rollouts.actions[:, :cut], qs)
        report.losses.extend(train_on_rollouts(model, params, rollouts))
        round_idx += 1
        log.info("pretrain round %d: loss %.4f", round_idx, np.mean(report.losses[-windows:]))
    return model, report


def zero_order_hold(latest: np.ndarray, age=None) -> np.ndarray:
    return np.array(latest, dtype=np.float64, copy=True)


def save_estimator(path, model: EstimatorModel, meta: dict | None = None):
    """Standalone estimator checkpoint (pretraining output)."""
    from edgequery.nn.checkpoint import pack_network, save_tensors

    header = {"kind": "estimator", "estimator": asdict(model.config), **(meta or {})}
    return save_tensors(path, pack_network("estimator", model), header)


def load_estimator(path) -> EstimatorModel:
    """Estimator from a standalone checkpoint or from a policy bundle."""
    from edgequery.nn.checkpoint import load_tensors, unpack_network

    tensors, meta = load_tensors(path)
    if "estimator" not in meta:
        raise ValueError(f"{path}: no estimator in checkpoint")
    cfg = {k: v for k, v in meta["estimator"].items() if k in EstimatorConfig.__dataclass_fields__}
    model = EstimatorModel(EstimatorConfig(**cfg))
    unpack_network("estimator", tensors, model)
    return model
