from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gvi.envs.control import EpisodeStep


@dataclass(frozen=True)
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminated: np.ndarray  # 1.0 where the bootstrap must be dropped

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """FIFO ring buffer with uniform, seeded sampling."""

    def __init__(self, capacity: int, obs_dim: int, seed=None, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=dtype)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=dtype)
        self.terminated = np.zeros(capacity, dtype=dtype)
        self.size = 0
        self.cursor = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def add(self, step: EpisodeStep) -> None:
        i = self.cursor
        self.obs[i] = step.observation
        self.next_obs[i] = step.next_observation
        self.actions[i] = step.action
        self.rewards[i] = step.reward
        self.terminated[i] = float(step.terminated)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, fewer than batch size {batch_size}")
        idx = self.rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx],
                     self.terminated[idx])

    def get_state(self) -> dict:
        n = self.size
        return {
            "capacity": self.capacity,
            "size": n,
            "cursor": self.cursor,
            "obs": self.obs[:n].copy(),
            "next_obs": self.next_obs[:n].copy(),
            "actions": self.actions[:n].copy(),
            "rewards": self.rewards[:n].copy(),
            "terminated": self.terminated[:n].copy(),
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        if state["capacity"] != self.capacity:
            raise ValueError("replay capacity differs from the saved buffer")
        n = state["size"]
        for name in ("obs", "next_obs", "actions", "rewards", "terminated"):
            getattr(self, name)[:n] = state[name]
        self.size, self.cursor = n, state["cursor"]
        self.rng.bit_generator.state = state["rng"]
