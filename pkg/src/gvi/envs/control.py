"""Classic control tasks simulated in numpy.

Constants and update rules follow the public CartPole-v1 and Pendulum-v0
definitions; Pendulum's torque range is discretized into evenly spaced
actions. ``dynamics`` works on single states or on stacked ``(n, d)``
batches so evaluation rollouts can run in lockstep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gvi.exceptions import InvalidAction


@dataclass(frozen=True)
class EpisodeStep:
    observation: np.ndarray
    action: int
    reward: float
    next_observation: np.ndarray
    done_flag: bool
    terminated: bool = False  # true terminal state, as opposed to hitting the episode cap


@dataclass(frozen=True)
class CartPole:
    task_id: str = "cartpole"
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5  # half the pole length
    force_mag: float = 10.0
    tau: float = 0.02
    theta_threshold: float = 12 * 2 * math.pi / 360
    x_threshold: float = 2.4
    init_band: float = 0.05
    episode_cap: int = 500
    action_count: int = 2
    observation_dim: int = 4
    state_dim: int = 4

    def initial_state(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = (self.state_dim,) if n is None else (n, self.state_dim)
        return rng.uniform(-self.init_band, self.init_band, size=size)

    def observe(self, state: np.ndarray) -> np.ndarray:
        return np.array(state, dtype=float, copy=True)

    def dynamics(self, state, action):
        state = np.asarray(state, dtype=float)
        x, x_dot, theta, theta_dot = np.moveaxis(state, -1, 0)
        force = np.where(np.asarray(action) == 1, self.force_mag, -self.force_mag)
        total_mass = self.masspole + self.masscart
        polemass_length = self.masspole * self.length
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        nxt = np.stack([
            x + self.tau * x_dot,
            x_dot + self.tau * x_acc,
            theta + self.tau * theta_dot,
            theta_dot + self.tau * theta_acc,
        ], axis=-1)
        terminated = (np.abs(nxt[..., 0]) > self.x_threshold) | (np.abs(nxt[..., 2]) > self.theta_threshold)
        reward = np.ones_like(nxt[..., 0])
        return nxt, reward, terminated


def angle_normalize(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


@dataclass(frozen=True)
class DiscretePendulum:
    task_id: str = "discrete_pendulum"
    max_speed: float = 8.0
    max_torque: float = 2.0
    dt: float = 0.05
    g: float = 10.0
    m: float = 1.0
    l: float = 1.0  # noqa: E741
    episode_cap: int = 200
    action_count: int = 5
    observation_dim: int = 3
    state_dim: int = 2

    @property
    def torques(self) -> np.ndarray:
        return np.linspace(-self.max_torque, self.max_torque, self.action_count)

    def initial_state(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = (self.state_dim,) if n is None else (n, self.state_dim)
        high = np.array([np.pi, 1.0])
        return rng.uniform(-high, high, size=size)

    def observe(self, state: np.ndarray) -> np.ndarray:
        th, thdot = np.moveaxis(np.asarray(state, dtype=float), -1, 0)
        return np.stack([np.cos(th), np.sin(th), thdot], axis=-1)

    def energy(self, state) -> np.ndarray:
        """Mechanical energy of the uniform rod (theta = 0 is upright)."""
        th, thdot = np.moveaxis(np.asarray(state, dtype=float), -1, 0)
        inertia = self.m * self.l**2 / 3.0
        return 0.5 * inertia * thdot**2 + self.m * self.g * (self.l / 2.0) * np.cos(th)

    def dynamics(self, state, action):
        th, thdot = np.moveaxis(np.asarray(state, dtype=float), -1, 0)
        u = self.torques[np.asarray(action)]
        costs = angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2
        new_thdot = thdot + (-3 * self.g / (2 * self.l) * np.sin(th + np.pi) + 3.0 / (self.m * self.l**2) * u) * self.dt
        new_th = th + new_thdot * self.dt
        new_thdot = np.clip(new_thdot, -self.max_speed, self.max_speed)
        nxt = np.stack([new_th, new_thdot], axis=-1)
        return nxt, -costs, np.zeros_like(costs, dtype=bool)


ControlTask = CartPole | DiscretePendulum

CARTPOLE = CartPole()
DISCRETE_PENDULUM = DiscretePendulum()
TASKS = {CARTPOLE.task_id: CARTPOLE, DISCRETE_PENDULUM.task_id: DISCRETE_PENDULUM}


def make_task(task_id: str) -> ControlTask:
    try:
        return TASKS[task_id]
    except KeyError:
        raise ValueError(f"unknown task {task_id!r}; expected one of {sorted(TASKS)}") from None


class ControlEnv:
    """Mutable single-episode simulator around an immutable task.

    Not shareable between concurrent actors.
    """

    def __init__(self, task: ControlTask, seed: int | None = None):
        self.task = task
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.task.initial_state(self.rng)
        self.t = 0
        return self.task.observe(self.state)

    def step(self, action: int) -> EpisodeStep:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.task.action_count):
            raise InvalidAction(f"action {action!r} outside [0, {self.task.action_count})")
        obs = self.task.observe(self.state)
        nxt, reward, terminated = self.task.dynamics(self.state, int(action))
        self.state = nxt
        self.t += 1
        terminated = bool(terminated)
        done = terminated or self.t >= self.task.episode_cap
        return EpisodeStep(obs, int(action), float(reward), self.task.observe(nxt), done, terminated)

    def get_state(self) -> dict:
        return {
            "state": None if self.state is None else self.state.copy(),
            "t": self.t,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, snapshot: dict):
        self.state = None if snapshot["state"] is None else np.array(snapshot["state"])
        self.t = snapshot["t"]
        self.rng.bit_generator.state = snapshot["rng"]


def reset(task: ControlTask, seed: int) -> np.ndarray:
    return ControlEnv(task).reset(seed)


def step(task: ControlTask, state: np.ndarray, action: int, t: int = 0) -> EpisodeStep:
    """Stateless single step from a physical ``state`` at time ``t``."""
    env = ControlEnv(task)
    env.state = np.array(state, dtype=float)
    env.t = t
    return env.step(action)
