"""Two-action soft actor-critic with automatic temperature tuning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from edgequery.nn import MLP, Module, ParameterSet, Tensor, adam_step, backprop, log_softmax, parameter
from edgequery.sac.buffer import ReplayBuffer, TransitionBatch
from edgequery.sac.returns import REWARD_SCALE

N_ACTIONS = 2

# Per-range settings: (q_low, q_high, n, target_entropy)
RANGE_PRESETS = {
    "low": ((0.05, 0.1), 60, 0.09),
    "mid": ((0.1, 0.3), 20, 0.3),
    "high": ((0.3, 1.0), 10, 0.6),
    "one": ((0.05, 1.0), 50, 0.2),
}


@dataclass
class SacHyper:
    n: int = 10
    target_entropy: float = 0.6
    lr_actor_critic: float = 1.5e-4
    lr_estimator: float = 1e-4
    lr_temperature: float = 1.5e-5
    gamma: float = 0.99
    batch_size: int = 256
    tau_polyak: float = 0.005
    q_range: tuple[float, float] = (0.3, 1.0)
    init_alpha: float = 0.01
    fc_size: int = 64
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau_polyak <= 1.0:
            raise ValueError("tau_polyak must lie in (0, 1]")
        if self.init_alpha <= 0:
            raise ValueError("init_alpha must be positive")
        self.q_range = (float(self.q_range[0]), float(self.q_range[1]))

    @classmethod
    def for_range(cls, range_id: str, **overrides) -> "SacHyper":
        if range_id not in RANGE_PRESETS:
            raise ValueError(f"unknown range {range_id!r}; expected one of {sorted(RANGE_PRESETS)}")
        q_range, n, entropy = RANGE_PRESETS[range_id]
        return cls(**{"n": n, "target_entropy": entropy, "q_range": q_range, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_range"] = list(self.q_range)
        return d


class Actor(Module):
    """MLP whose two outputs are turned into log-probabilities."""

    def __init__(self, obs_dim: int, fc_size: int = 64, rng=None):
        self.net = MLP([obs_dim, fc_size, fc_size, N_ACTIONS], rng=rng)

    def log_probs(self, obs) -> Tensor:
        return log_softmax(self.net(obs))

    def probs(self, obs) -> np.ndarray:
        return np.exp(self.log_probs(np.atleast_2d(obs)).data)


class Critic(Module):
    """Q-values for both actions.

    The network output is a residual around ``value_offset`` (the return of
    a perfect estimate forever), scaled by ``value_scale``. Discounted values
    sit near the offset and differ between actions by small amounts, which a
    zero-centred output reaches far sooner than the raw magnitude.
    """

    def __init__(self, obs_dim: int, fc_size: int = 64, rng=None, value_offset: float = 0.0,
                 value_scale: float = 1.0):
        self.net = MLP([obs_dim, fc_size, fc_size, N_ACTIONS], rng=rng)
        self.value_offset = float(value_offset)
        self.value_scale = float(value_scale)

    def __call__(self, obs) -> Tensor:
        out = self.net(obs)
        if self.value_scale != 1.0:
            out = out * self.value_scale
        return out + self.value_offset if self.value_offset else out

    def values(self, obs) -> np.ndarray:
        return self(np.atleast_2d(obs)).data


@dataclass
class TemperatureState:
    log_alpha: Tensor
    params: ParameterSet

    @classmethod
    def create(cls, init_alpha: float = 1.0) -> "TemperatureState":
        t = parameter(np.array([math.log(init_alpha)]), "log_alpha")
        return cls(t, ParameterSet(["log_alpha"], [t]))

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))


@dataclass
class SacModels:
    actor: Actor
    critic: Critic
    target_critic: Critic
    temperature: TemperatureState
    actor_params: ParameterSet = field(init=False)
    critic_params: ParameterSet = field(init=False)

    def __post_init__(self):
        self.actor_params = ParameterSet.from_module(self.actor)
        self.critic_params = ParameterSet.from_module(self.critic)

    @classmethod
    def create(cls, obs_dim: int, hyper: SacHyper, seed: int = 0, value_offset: float | None = None,
               value_scale: float = 1.0) -> "SacModels":
        rng = np.random.default_rng(seed)
        if value_offset is None:
            value_offset = REWARD_SCALE / (1.0 - hyper.gamma)
        actor = Actor(obs_dim, hyper.fc_size, rng)
        critic = Critic(obs_dim, hyper.fc_size, rng, value_offset, value_scale)
        return cls(actor, critic, critic.clone(), TemperatureState.create(hyper.init_alpha))


@dataclass
class UpdateStats:
    critic_loss: float
    actor_loss: float
    temperature_loss: float
    entropy: float
    alpha: float
    mean_q: float


def soft_state_value(q: np.ndarray, log_pi: np.ndarray, alpha: float) -> np.ndarray:
    """sum_a pi(a) (Q(a) - alpha log pi(a)), row-wise."""
    pi = np.exp(log_pi)
    return np.sum(pi * (q - alpha * log_pi), axis=-1)


def critic_targets(batch: TransitionBatch, target_critic: Critic, actor: Actor, alpha: float) -> np.ndarray:
    q_next = target_critic.values(batch.next_obs)
    log_pi = actor.log_probs(np.atleast_2d(batch.next_obs)).data
    v_next = soft_state_value(q_next, log_pi, alpha)
    y = batch.returns + np.where(batch.terminal, 0.0, batch.discounts * v_next)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite critic target")
    return y


def polyak_update(target: Module, source: Module, tau: float) -> None:
    for (_, t), (_, s) in zip(target.named_parameters(), source.named_parameters()):
        t.data *= 1.0 - tau
        t.data += tau * s.data


def policy_entropy(log_pi: np.ndarray) -> np.ndarray:
    return -np.sum(np.exp(log_pi) * log_pi, axis=-1)


def sac_update(
    batch_or_buffer,
    models: SacModels,
    hyper: SacHyper,
    update_actor: bool = True,
    update_temperature: bool = True,
    fixed_alpha: float | None = None,
) -> UpdateStats:
    """One critic step, one actor step, one temperature step, then Polyak averaging.

    Accepts a ``ReplayBuffer`` (a batch of ``hyper.batch_size`` is sampled) or
    a ready ``TransitionBatch``. ``fixed_alpha`` pins the temperature (used by
    critic-only evaluation).
    """
    batch = batch_or_buffer
    if isinstance(batch_or_buffer, ReplayBuffer):
        if len(batch_or_buffer) < hyper.batch_size:
            raise ValueError("replay buffer holds fewer transitions than one batch")
        batch = batch_or_buffer.sample(hyper.batch_size)
    alpha = models.temperature.alpha if fixed_alpha is None else fixed_alpha
    obs = np.atleast_2d(batch.obs)
    onehot = np.eye(N_ACTIONS)[batch.actions]

    # critic
    y = critic_targets(batch, models.target_critic, models.actor, alpha)
    q_all = models.critic(obs)
    q_taken = (q_all * onehot).sum(axis=1)
    diff = q_taken - y
    critic_loss = (diff * diff).mean()
    if not np.isfinite(critic_loss.data):
        raise FloatingPointError("non-finite critic loss")
    grads = backprop(critic_loss, models.critic_params.tensors)
    adam_step(models.critic_params, grads, hyper.lr_actor_critic, clip_norm=hyper.clip_norm)

    # actor, against the freshly updated critic
    q_now = models.critic.values(obs)
    log_pi = models.actor.log_probs(obs)
    pi = log_pi.exp()
    actor_loss = (pi * (log_pi * alpha - q_now)).sum(axis=1).mean()
    if not np.isfinite(actor_loss.data):
        raise FloatingPointError("non-finite actor loss")
    if update_actor:
        grads = backprop(actor_loss, models.actor_params.tensors)
        adam_step(models.actor_params, grads, hyper.lr_actor_critic, clip_norm=hyper.clip_norm)

    # temperature: descend log_alpha * (H - target)
    entropy = float(policy_entropy(log_pi.data).mean())
    gap = entropy - hyper.target_entropy
    temp = models.temperature
    temperature_loss = float(temp.log_alpha.data[0]) * gap
    if update_temperature and fixed_alpha is None:
        adam_step(temp.params, [np.array([gap])], hyper.lr_temperature)

    polyak_update(models.target_critic, models.critic, hyper.tau_polyak)
    return UpdateStats(
        critic_loss=float(critic_loss.data),
        actor_loss=float(actor_loss.data),
        temperature_loss=temperature_loss,
        entropy=entropy,
        alpha=temp.alpha if fixed_alpha is None else fixed_alpha,
        mean_q=float(q_now.mean()),
    )
