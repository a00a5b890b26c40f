"""Domain-randomized training of one QNet range model.

Several episodes run in lockstep. Every slot the shared estimator produces
estimates for all of them, the actor samples actions, and the transitions
are folded into n-step records in the replay buffer. One SAC update follows
each lockstep slot, and once per recurrent window the estimator takes one
supervised step on the window just played.
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from edgequery.estimator import (
    EstimatorConfig,
    EstimatorModel,
    PretrainConfig,
    SequenceBatch,
    estimator_train_step,
    make_estimator_params,
    pretrain,
)
from edgequery.nn.checkpoint import unpack_network
from edgequery.observation import NetworkStats, build_observation, observation_dim
from edgequery.sac.agent import SacHyper, SacModels, UpdateStats, sac_update
from edgequery.sac.buffer import NStepAccumulator, ReplayBuffer
from edgequery.sac.bundle import CheckpointBundle
from edgequery.sac.returns import reward
from edgequery.sim.episode import EpisodeBatch, EpisodeConfig
from edgequery.sim.source import SourceParams

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "episode", "q", "reward", "query_rate", "avg_age_slots", "avg_err",
    "entropy", "alpha", "critic_loss", "actor_loss", "temperature_loss", "estimator_loss",
)


@dataclass
class TrainConfig:
    range_id: str = "high"
    episodes: int = 64
    episode_length: int = 2000
    n_envs: int = 16
    seed: int = 0
    obs_kind: str = "qnet"
    learning_starts: int = 1000
    updates_per_step: int = 1
    train_estimator: bool = True
    estimator_batch: int = 16
    buffer_capacity: int = 1_000_000
    critic_value_scale: float = 1.0
    pretrain_updates: int = 200
    max_seconds: float | None = None
    hyper: dict = field(default_factory=dict)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    source: SourceParams = field(default_factory=SourceParams)

    def __post_init__(self):
        if self.episodes < 1 or self.n_envs < 1 or self.episode_length < 1:
            raise ValueError("episodes, n_envs and episode_length must be >= 1")
        observation_dim(self.obs_kind)

    def sac_hyper(self) -> SacHyper:
        return SacHyper.for_range(self.range_id, **self.hyper)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        est = EstimatorConfig(**d.pop("estimator", {}))
        src = SourceParams(**d.pop("source", {}))
        return cls(estimator=est, source=src, **d)


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    metrics: list[dict]
    checkpoint_path: Path | None
    seconds: float


def _snapshot(bundle: CheckpointBundle) -> dict:
    return copy.deepcopy(bundle.tensors())


def train_qnet(
    cfg: TrainConfig,
    estimator: EstimatorModel | None = None,
    run_dir=None,
) -> TrainResult:
    """Train one range model; returns the final bundle (or best-so-far on timeout)."""
    t_start = time.time()
    hyper = cfg.sac_hyper()
    ss = np.random.SeedSequence(cfg.seed)
    net_seed, buf_seed, act_seed, ep_seed, est_seed = (int(s) for s in ss.generate_state(5))

    if estimator is None:
        estimator = EstimatorModel(cfg.estimator)
        if cfg.pretrain_updates > 0:
            pre = PretrainConfig(updates=cfg.pretrain_updates, seed=est_seed,
                                 episode=EpisodeConfig(source=cfg.source))
            estimator, _ = pretrain(pre, estimator)
    else:
        estimator = estimator.clone()
    est_params = make_estimator_params(estimator)
    estimator.config.lr = hyper.lr_estimator

    obs_dim = observation_dim(cfg.obs_kind)
    models = SacModels.create(obs_dim, hyper, seed=net_seed, value_scale=cfg.critic_value_scale)
    buffer = ReplayBuffer(cfg.buffer_capacity, seed=buf_seed)
    act_rng = np.random.default_rng(act_seed)
    est_rng = np.random.default_rng(est_seed)
    ep_cfg = EpisodeConfig(q_range=hyper.q_range, episode_length=cfg.episode_length,
                           gamma=hyper.gamma, seed=cfg.seed, source=cfg.source)
    bundle = CheckpointBundle(cfg.range_id, cfg.obs_kind, hyper, estimator, models, est_params,
                              meta={"seed": cfg.seed, "episodes": 0})
    bptt = estimator.config.bptt
    metrics: list[dict] = []
    run_dir = Path(run_dir) if run_dir is not None else None
    writer = fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / f"config_{cfg.range_id}.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
        fh = open(run_dir / f"metrics_{cfg.range_id}.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()

    last_update: UpdateStats | None = None
    est_loss = float("nan")
    best_reward, best_state = -np.inf, None
    episodes_done, round_idx = 0, 0
    timed_out = False
    try:
        while episodes_done < cfg.episodes and not timed_out:
            n = min(cfg.n_envs, cfg.episodes - episodes_done)
            seeds = [ep_seed % (2**31) + 100_000 * round_idx + i for i in range(n)]
            batch = EpisodeBatch(ep_cfg, seeds)
            estimator.reset(batch.latest)
            stats = NetworkStats(n)
            acc = NStepAccumulator(hyper.n, hyper.gamma, buffer)
            L = cfg.episode_length
            win_ages = np.zeros((n, bptt))
            win_latest = np.zeros((n, bptt, 4))
            win_truth = np.zeros((n, bptt, 4))
            h0 = c0 = p0 = None
            rew_sum = np.zeros(n)
            act_sum = np.zeros(n)
            age_sum = np.zeros(n)
            err_sum = np.zeros(n)
            prev_obs = prev_act = None
            for t in range(L + 1):
                ages = batch.ages
                k = t % bptt
                if k == 0:
                    h0, c0, p0 = estimator.state()
                est = estimator.step(batch.latest, ages)
                win_ages[:, k] = ages
                win_latest[:, k] = batch.latest
                win_truth[:, k] = batch.truth
                diff = est - batch.truth
                sq = np.einsum("ij,ij->i", diff, diff)
                obs = build_observation(cfg.obs_kind, est, batch.latest, ages, stats)
                if t > 0:
                    r = reward(sq)
                    rew_sum += r
                    acc.record(prev_obs, prev_act, r, obs, done=(t == L))
                if t == L:
                    break
                probs = models.actor.probs(obs)[:, 1]
                actions = (act_rng.random(n) < probs).astype(np.int64)
                act_sum += actions
                age_sum += ages
                err_sum += np.linalg.norm(diff[:, :2], axis=1)
                batch.advance(actions)
                stats.update(actions, batch.delivered)
                prev_obs, prev_act = obs, actions
                if len(buffer) >= max(cfg.learning_starts, hyper.batch_size):
                    for _ in range(cfg.updates_per_step):
                        last_update = sac_update(buffer, models, hyper)
                if cfg.train_estimator and k == bptt - 1:
                    rows = est_rng.choice(n, size=min(cfg.estimator_batch, n), replace=False)
                    rows.sort()
                    seq = SequenceBatch(win_ages[rows], win_latest[rows], win_truth[rows],
                                        h0[rows], c0[rows], p0[rows])
                    est_loss = estimator_train_step(estimator, est_params, seq)
            for i in range(n):
                row = {
                    "episode": episodes_done + i,
                    "q": batch.qs[i],
                    "reward": rew_sum[i] / L,
                    "query_rate": act_sum[i] / L,
                    "avg_age_slots": age_sum[i] / L,
                    "avg_err": err_sum[i] / L,
                    "entropy": last_update.entropy if last_update else float("nan"),
                    "alpha": last_update.alpha if last_update else models.temperature.alpha,
                    "critic_loss": last_update.critic_loss if last_update else float("nan"),
                    "actor_loss": last_update.actor_loss if last_update else float("nan"),
                    "temperature_loss": last_update.temperature_loss if last_update else float("nan"),
                    "estimator_loss": est_loss,
                }
                metrics.append(row)
                if writer is not None:
                    writer.writerow(row)
            if fh is not None:
                fh.flush()
            episodes_done += n
            round_idx += 1
            mean_r = float(np.mean(rew_sum / L))
            log.info("%s round %d: episodes %d, reward %.5f, query rate %.3f, alpha %.2e",
                     cfg.range_id, round_idx, episodes_done, mean_r, float(np.mean(act_sum / L)),
                     models.temperature.alpha)
            bundle.meta["episodes"] = episodes_done
            if mean_r > best_reward:
                best_reward, best_state = mean_r, (_snapshot(bundle), episodes_done)
            if cfg.max_seconds is not None and time.time() - t_start > cfg.max_seconds:
                timed_out = True
    finally:
        if fh is not None:
            fh.close()

    if timed_out and episodes_done < cfg.episodes:
        msg = f"budget exhausted after {episodes_done}/{cfg.episodes} episodes; returning best-so-far"
        log.warning(msg)
        if best_state is not None:
            _restore(bundle, best_state[0])
            bundle.meta["episodes"] = best_state[1]
        bundle.warning = msg
        metrics.append({"episode": episodes_done, "q": float("nan"), "reward": best_reward,
                        "query_rate": float("nan"), "avg_age_slots": float("nan"),
                        "avg_err": float("nan"), "entropy": float("nan"), "alpha": float("nan"),
                        "critic_loss": float("nan"), "actor_loss": float("nan"),
                        "temperature_loss": float("nan"), "estimator_loss": float("nan")})
    path = None
    if run_dir is not None:
        path = bundle.save(run_dir / "checkpoints" / f"{cfg.range_id}.eqck")
    return TrainResult(bundle, metrics, path, time.time() - t_start)


def _restore(bundle: CheckpointBundle, tensors: dict) -> None:
    m = bundle.models
    unpack_network("estimator", tensors, bundle.estimator, bundle.estimator_params)
    unpack_network("actor", tensors, m.actor, m.actor_params)
    unpack_network("critic", tensors, m.critic, m.critic_params)
    unpack_network("target_critic", tensors, m.target_critic)
    m.temperature.log_alpha.data = tensors["temperature/log_alpha"].copy()
