"""n-step transition folding and the uniform replay ring."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from edgequery.sac.returns import nstep_fold


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    n_step_return: float
    obs_after_n: np.ndarray
    n_used: int
    discount_to_bootstrap: float
    terminal: bool


class NStepAccumulator:
    """Folds per-slot rewards of several parallel episodes into n-step transitions.

    ``record`` takes one slot for every episode at once. When an episode ends
    its pending slots are flushed with fewer than n rewards. A time-limit end
    keeps the bootstrap (the task itself has no terminal state) unless
    ``bootstrap_on_timeout`` is off, in which case the flushed records are
    marked terminal.
    """

    def __init__(self, n: int, gamma: float, sink, bootstrap_on_timeout: bool = True):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.gamma = gamma
        self.sink = sink
        self.bootstrap_on_timeout = bootstrap_on_timeout
        self._pending: list[deque] = []

    def _emit(self, pending: deque, next_obs, terminal: bool) -> Transition:
        obs, action, _ = pending[0]
        rewards = [r for _, _, r in pending]
        k = len(rewards)
        return Transition(
            obs=obs,
            action=int(action),
            n_step_return=nstep_fold(rewards, None, self.gamma),
            obs_after_n=next_obs,
            n_used=k,
            discount_to_bootstrap=self.gamma**k,
            terminal=terminal,
        )

    def record(self, obs, actions, rewards, next_obs, done: bool, terminal: bool = False) -> None:
        obs = np.atleast_2d(obs)
        next_obs = np.atleast_2d(next_obs)
        actions = np.atleast_1d(actions)
        rewards = np.atleast_1d(rewards)
        if not self._pending:
            self._pending = [deque() for _ in range(len(obs))]
        out = []
        for i, pending in enumerate(self._pending):
            pending.append((obs[i].copy(), int(actions[i]), float(rewards[i])))
            if len(pending) == self.n:
                out.append(self._emit(pending, next_obs[i].copy(), terminal))
                pending.popleft()
            if done:
                flag = terminal or not self.bootstrap_on_timeout
                while pending:
                    out.append(self._emit(pending, next_obs[i].copy(), flag))
                    pending.popleft()
        if done:
            self._pending = []
        if out:
            self.sink.add_many(out)


@dataclass
class TransitionBatch:
    obs: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    next_obs: np.ndarray
    discounts: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Ring buffer of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int = 1_000_000, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self._cursor = 0
        self._size = 0
        self._arrays: dict[str, np.ndarray] | None = None
        self.added = 0

    def __len__(self) -> int:
        return self._size

    def _allocate(self, obs_dim: int) -> None:
        c = self.capacity
        self._arrays = {
            "obs": np.zeros((c, obs_dim)),
            "actions": np.zeros(c, dtype=np.int64),
            "returns": np.zeros(c),
            "next_obs": np.zeros((c, obs_dim)),
            "discounts": np.zeros(c),
            "n_used": np.zeros(c, dtype=np.int64),
            "terminal": np.zeros(c, dtype=bool),
        }

    def add(self, t: Transition) -> None:
        self.add_many([t])

    def add_many(self, transitions) -> None:
        if not transitions:
            return
        with self._lock:
            if self._arrays is None:
                self._allocate(len(transitions[0].obs))
            a = self._arrays
            for t in transitions:
                i = self._cursor
                a["obs"][i] = t.obs
                a["actions"][i] = t.action
                a["returns"][i] = t.n_step_return
                a["next_obs"][i] = t.obs_after_n
                a["discounts"][i] = t.discount_to_bootstrap
                a["n_used"][i] = t.n_used
                a["terminal"][i] = t.terminal
                self._cursor = (i + 1) % self.capacity
                self._size = min(self._size + 1, self.capacity)
                self.added += 1

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self._size, size=batch_size)

    def sample(self, batch_size: int) -> TransitionBatch:
        with self._lock:
            idx = self.sample_indices(batch_size)
            a = self._arrays
            return TransitionBatch(*(a[k][idx].copy() for k in
                                     ("obs", "actions", "returns", "next_obs", "discounts", "terminal")))

    def get(self, index: int) -> Transition:
        """Entry by age order, 0 being the oldest still stored."""
        if not 0 <= index < self._size:
            raise IndexError(index)
        start = self._cursor if self._size == self.capacity else 0
        i = (start + index) % self.capacity
        a = self._arrays
        return Transition(a["obs"][i].copy(), int(a["actions"][i]), float(a["returns"][i]),
                          a["next_obs"][i].copy(), int(a["n_used"][i]), float(a["discounts"][i]), bool(a["terminal"][i]))
