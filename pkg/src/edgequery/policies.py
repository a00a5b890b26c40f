"""Querying policies behind one interface.

Every policy works on a batch of episodes at once: ``reset`` hands it one
random stream per episode, ``estimate`` is called first in each slot with
the latest measurements and ages, then ``act`` returns one action per
episode. Baselines estimate with a zero-order hold unless given an estimator.
"""

from __future__ import annotations

import copy
import math
import shlex
from pathlib import Path
from typing import Sequence

import numpy as np

from edgequery.estimator import EstimatorModel
from edgequery.observation import NetworkStats, build_observation
from edgequery.sac.bundle import CheckpointBundle
from edgequery.sim.episode import DecisionView

SIGMOID_VARIANTS = {"er": None, "er_over_n": 1.0, "half_er_over_n": 0.5, "third_er_over_n": 0.33}


def position_error(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    d = np.atleast_2d(estimate)[:, :2] - np.atleast_2d(truth)[:, :2]
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


class BasePolicy:
    kind = "base"

    def __init__(self, estimator: EstimatorModel | None = None):
        # shallow copy: weights are shared, the recurrent state belongs to this policy
        self.estimator = copy.copy(estimator) if estimator is not None else None
        self.streams = []

    def reset(self, streams) -> None:
        self.streams = list(streams)
        self._started = False

    def estimate(self, latest: np.ndarray, age: np.ndarray) -> np.ndarray:
        if self.estimator is None:
            return np.array(latest, dtype=np.float64, copy=True)
        if not self._started:
            self.estimator.reset(latest)
            self._started = True
        return self.estimator.step(latest, age)

    def act(self, view: DecisionView) -> np.ndarray:
        raise NotImplementedError


class AlwaysQuery(BasePolicy):
    kind = "always"

    def act(self, view):
        return np.ones(len(view.age), dtype=np.int64)


def threshold_act(err_now, delta: float):
    """1 iff the error strictly exceeds delta."""
    return (np.asarray(err_now) > delta).astype(np.int64)


class ThresholdPolicy(BasePolicy):
    """Queries when the true position error exceeds delta (evaluation-only oracle)."""

    kind = "threshold"

    def __init__(self, delta: float, estimator=None):
        super().__init__(estimator)
        self.delta = float(delta)

    def act(self, view):
        return threshold_act(position_error(view.estimate, view.truth), self.delta)


def sigmoid_probability(err_now, n_agents: int = 1, variant: str = "er"):
    if variant not in SIGMOID_VARIANTS:
        raise ValueError(f"unknown sigmoid variant {variant!r}; expected one of {sorted(SIGMOID_VARIANTS)}")
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    scale = SIGMOID_VARIANTS[variant]
    x = np.asarray(err_now, dtype=np.float64)
    return sigmoid(x if scale is None else scale * x / n_agents)


def sigmoid_act(err_now, n_agents: int, variant: str, uniforms):
    return (np.asarray(uniforms) < sigmoid_probability(err_now, n_agents, variant)).astype(np.int64)


class SigmoidPolicy(BasePolicy):
    """Queries with probability sigmoid(scaled error)."""

    kind = "sigmoid"

    def __init__(self, variant: str = "er", n_agents: int = 1, estimator=None):
        super().__init__(estimator)
        sigmoid_probability(0.0, n_agents, variant)
        self.variant = variant
        self.n_agents = int(n_agents)

    def act(self, view):
        u = np.array([s.uniform() for s in self.streams])
        return sigmoid_act(position_error(view.estimate, view.truth), self.n_agents, self.variant, u)


class BernoulliPolicy(BasePolicy):
    kind = "bernoulli"

    def __init__(self, p: float, estimator=None):
        super().__init__(estimator)
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        self.p = float(p)

    def act(self, view):
        return np.array([int(s.uniform() < self.p) for s in self.streams], dtype=np.int64)


def ensemble_argmax(q_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pick the action of the largest Q-value across models; ties go to action 0.

    ``q_values`` has shape (batch, models, 2). Returns (actions, chosen model).
    """
    q = np.asarray(q_values, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    best0 = q[:, :, 0].max(axis=1)
    best1 = q[:, :, 1].max(axis=1)
    actions = (best1 > best0).astype(np.int64)
    col = np.where(actions == 1, 1, 0)
    model = np.argmax(q[np.arange(len(q)), :, col], axis=1)
    return actions, model


class QNetPolicy(BasePolicy):
    """One or more trained range models.

    Each model runs its own estimator on the shared stream of ages and
    measurements. In ``critic`` mode the action is the argmax over all the
    models' Q-values (three models: six values), and the reported estimate is
    the chosen model's. ``actor`` mode (single model only) samples the actor.
    """

    kind = "qnet"

    def __init__(self, bundles: Sequence[CheckpointBundle], mode: str = "critic"):
        super().__init__(None)
        if not bundles:
            raise ValueError("at least one checkpoint is required")
        if mode not in ("critic", "actor"):
            raise ValueError("mode must be 'critic' or 'actor'")
        if mode == "actor" and len(bundles) != 1:
            raise ValueError("actor mode takes exactly one checkpoint")
        self.bundles = list(bundles)
        self.estimators = [copy.copy(b.estimator) for b in self.bundles]
        self.mode = mode
        self._obs = None
        self._actions = None

    @classmethod
    def from_paths(cls, paths, mode: str = "critic") -> "QNetPolicy":
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"missing checkpoint(s): {missing}")
        return cls([CheckpointBundle.load(p) for p in paths], mode)

    def reset(self, streams) -> None:
        super().reset(streams)
        self._prev_age = None
        self._prev_actions = None
        self._stats = [NetworkStats(len(self.streams)) for _ in self.bundles]

    def estimate(self, latest, age):
        latest = np.atleast_2d(latest)
        age = np.atleast_1d(np.asarray(age, dtype=np.float64))
        n = len(latest)
        if not self._started:
            for e in self.estimators:
                e.reset(latest)
            self._stats = [NetworkStats(n) for _ in self.bundles]
            self._started = True
        elif self._prev_actions is not None:
            arrived = age != self._prev_age + 1
            for s in self._stats:
                s.update(self._prev_actions, arrived)
        self._prev_age = age
        estimates, qs, obs = [], [], []
        for b, e, stats in zip(self.bundles, self.estimators, self._stats):
            est = e.step(latest, age)
            o = build_observation(b.obs_kind, est, latest, age, stats)
            estimates.append(est)
            obs.append(o)
            qs.append(b.models.critic.values(o))
        q = np.stack(qs, axis=1)
        if self.mode == "critic":
            actions, chosen = ensemble_argmax(q)
        else:
            p1 = self.bundles[0].models.actor.probs(obs[0])[:, 1]
            u = np.array([s.uniform() for s in self.streams]) if self.streams else np.random.random(n)
            actions, chosen = (u < p1).astype(np.int64), np.zeros(n, dtype=int)
        self._actions = actions
        self._obs = obs[0]
        self.last_q = q
        self.last_model = chosen
        stacked = np.stack(estimates, axis=1)
        return stacked[np.arange(n), chosen]

    def act(self, view):
        self._prev_actions = self._actions
        return self._actions

    def observation(self):
        return self._obs


# policy strings ------------------------------------------------------------------


def parse_policy_spec(spec: str) -> dict:
    """'kind=threshold delta=0.5' -> {'kind': 'threshold', 'delta': '0.5'}."""
    out = {}
    for token in shlex.split(spec):
        if "=" not in token:
            raise ValueError(f"policy spec token {token!r} is not key=value")
        key, value = token.split("=", 1)
        out[key.strip()] = value.strip()
    if "kind" not in out:
        raise ValueError(f"policy spec {spec!r} has no kind")
    return out


def _load_estimator(path) -> EstimatorModel:
    from edgequery.estimator import load_estimator

    return load_estimator(path)


def make_policy(spec: str | dict, base_dir=None):
    d = parse_policy_spec(spec) if isinstance(spec, str) else dict(spec)
    kind = d.pop("kind")
    base = Path(base_dir) if base_dir else Path(".")

    def path(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    estimator = _load_estimator(path(d.pop("estimator"))) if "estimator" in d else None
    if kind in ("always", "always-query"):
        return AlwaysQuery(estimator)
    if kind == "never":
        return ThresholdPolicy(math.inf, estimator)
    if kind == "threshold":
        return ThresholdPolicy(float(d["delta"]), estimator)
    if kind == "sigmoid":
        return SigmoidPolicy(d.get("variant", "er"), int(d.get("n_agents", 1)), estimator)
    if kind == "bernoulli":
        return BernoulliPolicy(float(d["p"]), estimator)
    if kind in ("qnet", "qnet-one"):
        return QNetPolicy.from_paths([path(d["checkpoint"])], d.get("mode", "critic"))
    if kind == "qnet-ensemble":
        paths = [path(p) for p in d["checkpoints"].split(",")]
        if len(paths) != 3:
            raise ValueError("qnet-ensemble takes three checkpoints")
        return QNetPolicy.from_paths(paths)
    raise ValueError(f"unknown policy kind {kind!r}")
