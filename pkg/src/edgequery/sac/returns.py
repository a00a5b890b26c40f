"""Reward shaping and n-step discounted folding."""

from __future__ import annotations

from typing import Sequence

import numpy as np

REWARD_SCALE = 5.0
MAX_SQUARED_ERROR = 8e4


def reward(err_sq, scale: float = REWARD_SCALE, max_err_sq: float = MAX_SQUARED_ERROR):
    """Shifted, scaled negative squared error, clamped to ``[0, scale]``.

    Accepts a scalar or an array of squared errors.
    """
    err = np.asarray(err_sq, dtype=np.float64)
    if np.any(err < 0):
        raise ValueError("squared error must be non-negative")
    out = scale * (1.0 - np.minimum(err, max_err_sq) / max_err_sq)
    return float(out) if out.ndim == 0 else out


def nstep_fold(rewards: Sequence[float], bootstrap: float | None, gamma: float) -> float:
    """sum_k gamma^k r_k + gamma^len * bootstrap; pass ``bootstrap=None`` on terminal."""
    if len(rewards) == 0:
        raise ValueError("need at least one reward")
    total = 0.0
    for r in reversed(rewards):
        total = r + gamma * total
    if bootstrap is not None:
        total += gamma ** len(rewards) * bootstrap
    return total
