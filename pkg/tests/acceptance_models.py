"""Desk-scale models for the trend criteria, trained once and cached on disk.

Run ``python3 tests/acceptance_models.py`` to build the cache ahead of the
test session; the acceptance fixture calls the same function and retrains
only what is missing or was built from a different recipe.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("EDGEQUERY_ACCEPTANCE_CACHE", ROOT / "acceptance_cache"))

RECIPE = {
    "pretrain_updates": 10_000,
    "pretrain_seed": 2024,
    "episodes": 2000,
    "episode_length": 2000,
    "n_envs": 64,
    "hidden_size": 64,
    "fc_size": 64,
    "updates_per_step": 1,
    "observation": "tanh",
    "hyper": {"lr_temperature": 1.5e-5},
    "seeds": {"low": 11, "mid": 12, "high": 13, "one": 14},
}
RANGES = ("low", "mid", "high", "one")

log = logging.getLogger("acceptance")


def recipe_digest(recipe: dict = RECIPE) -> str:
    return hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:16]


def _stamp(path: Path) -> Path:
    return path.with_suffix(".recipe")


def _fresh(path: Path, digest: str) -> bool:
    return path.exists() and _stamp(path).exists() and _stamp(path).read_text() == digest


def ensure_estimator(cache: Path = CACHE, recipe: dict = RECIPE) -> Path:
    from edgequery.estimator import EstimatorConfig, EstimatorModel, PretrainConfig, pretrain, save_estimator

    path = cache / "estimator.eqck"
    digest = recipe_digest({k: recipe[k] for k in ("pretrain_updates", "pretrain_seed", "hidden_size", "fc_size")})
    if _fresh(path, digest):
        return path
    cache.mkdir(parents=True, exist_ok=True)
    t = time.time()
    est = EstimatorModel(EstimatorConfig(hidden_size=recipe["hidden_size"], fc_size=recipe["fc_size"],
                                         seed=recipe["pretrain_seed"]))
    model, report = pretrain(PretrainConfig(updates=recipe["pretrain_updates"], seed=recipe["pretrain_seed"]), est)
    save_estimator(path, model, {"updates": recipe["pretrain_updates"], "final_loss": report.losses[-1]})
    _stamp(path).write_text(digest)
    log.info("pretrained estimator in %.0f s", time.time() - t)
    return path


def ensure_models(cache: Path = CACHE, recipe: dict = RECIPE, ranges=RANGES) -> dict[str, Path]:
    from edgequery.estimator import EstimatorConfig, load_estimator
    from edgequery.sac.train import TrainConfig, train_qnet

    est_path = ensure_estimator(cache, recipe)
    digest = recipe_digest(recipe)
    out = {}
    for rid in ranges:
        path = cache / f"{rid}.eqck"
        if not _fresh(path, digest):
            cfg = TrainConfig(
                range_id=rid, episodes=recipe["episodes"], episode_length=recipe["episode_length"],
                n_envs=recipe["n_envs"], seed=recipe["seeds"][rid], updates_per_step=recipe["updates_per_step"],
                hyper={"fc_size": recipe["fc_size"], **recipe["hyper"]},
                estimator=EstimatorConfig(hidden_size=recipe["hidden_size"], fc_size=recipe["fc_size"]),
            )
            result = train_qnet(cfg, load_estimator(est_path), run_dir=cache / f"run_{rid}")
            result.bundle.save(path)
            _stamp(path).write_text(digest)
            log.info("trained %s in %.0f s", rid, result.seconds)
        out[rid] = path
    return out


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    sys.path.insert(0, str(ROOT / "src"))
    paths = ensure_models()
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
