"""Estimator + actor + critic + temperature saved as one checkpoint file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from edgequery.estimator import EstimatorConfig, EstimatorModel, make_estimator_params
from edgequery.nn import ParameterSet
from edgequery.nn.checkpoint import load_tensors, pack_network, save_tensors, unpack_network
from edgequery.observation import observation_dim
from edgequery.sac.agent import Actor, Critic, SacHyper, SacModels, TemperatureState
from edgequery.sim.source import STATE_DIM


@dataclass
class CheckpointBundle:
    range_id: str
    obs_kind: str
    hyper: SacHyper
    estimator: EstimatorModel
    models: SacModels
    estimator_params: ParameterSet | None = None
    meta: dict = field(default_factory=dict)
    warning: str | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        m = self.models
        out = {}
        out.update(pack_network("estimator", self.estimator, self.estimator_params))
        out.update(pack_network("actor", m.actor, m.actor_params))
        out.update(pack_network("critic", m.critic, m.critic_params))
        out.update(pack_network("target_critic", m.target_critic))
        out.update(pack_network("temperature", _TemperatureView(m.temperature), m.temperature.params))
        return out

    def header(self) -> dict:
        m = self.models
        steps = {"actor": m.actor_params.step, "critic": m.critic_params.step,
                 "temperature": m.temperature.params.step}
        if self.estimator_params is not None:
            steps["estimator"] = self.estimator_params.step
        return {
            "range_id": self.range_id,
            "obs_kind": self.obs_kind,
            "hyper": self.hyper.to_dict(),
            "estimator": {**asdict(self.estimator.config), "input_dim": 2 * STATE_DIM + 1,
                          "output_dim": STATE_DIM},
            "critic": {"value_offset": m.critic.value_offset, "value_scale": m.critic.value_scale},
            "adam_steps": steps,
            "warning": self.warning,
            "extra": self.meta,
        }

    def save(self, path) -> Path:
        return save_tensors(path, self.tensors(), self.header())

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        tensors, meta = load_tensors(path)
        if "hyper" not in meta or "estimator" not in meta:
            raise ValueError(f"{path}: not a policy bundle")
        hyper_d = dict(meta["hyper"])
        hyper_d["q_range"] = tuple(hyper_d["q_range"])
        hyper = SacHyper(**hyper_d)
        est_d = {k: v for k, v in meta["estimator"].items() if k not in ("input_dim", "output_dim")}
        estimator = EstimatorModel(EstimatorConfig(**est_d))
        est_params = make_estimator_params(estimator)
        unpack_network("estimator", tensors, estimator, est_params)
        obs_dim = observation_dim(meta["obs_kind"])
        crit = meta["critic"]
        actor = Actor(obs_dim, hyper.fc_size)
        critic = Critic(obs_dim, hyper.fc_size, None, crit["value_offset"], crit["value_scale"])
        target = Critic(obs_dim, hyper.fc_size, None, crit["value_offset"], crit["value_scale"])
        models = SacModels(actor, critic, target, TemperatureState.create(1.0))
        unpack_network("actor", tensors, actor, models.actor_params)
        unpack_network("critic", tensors, critic, models.critic_params)
        unpack_network("target_critic", tensors, target)
        view = _TemperatureView(models.temperature)
        unpack_network("temperature", tensors, view, models.temperature.params)
        steps = meta.get("adam_steps", {})
        models.actor_params.step = steps.get("actor", 0)
        models.critic_params.step = steps.get("critic", 0)
        models.temperature.params.step = steps.get("temperature", 0)
        est_params.step = steps.get("estimator", 0)
        return cls(meta["range_id"], meta["obs_kind"], hyper, estimator, models, est_params,
                   meta.get("extra", {}), meta.get("warning"))


class _TemperatureView:
    """Adapter so the temperature scalar packs like a one-tensor module."""

    def __init__(self, temperature: TemperatureState):
        self.log_alpha = temperature.log_alpha

    def state_dict(self):
        return {"log_alpha": self.log_alpha.data.copy()}

    def load_state_dict(self, state):
        self.log_alpha.data = np.asarray(state["log_alpha"], dtype=np.float64).copy()
