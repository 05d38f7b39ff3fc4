"""Deep geometric value iteration and its constant-coefficient baseline.

The network learns rescaled values q (policy pi = softmax(q)) against

    y = clip(ln pi(a|s)) + r / lam' + (lam / lam') gamma (1 - term) <pi(s'), q(s') - ln pi(s')>

with no target network by default. Each gradient step measures the batch's
maximum absolute TD error, updates (lam, lam') with the tracker rule and
then takes one Adam step on the squared error to the refreshed target. The
baseline is the same loop with lam = lam' frozen.
"""
from __future__ import annotations

import csv
import logging
import math
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from gvi.deep.adam import AdamState, adam_update
from gvi.deep.mlp import MlpParams, backward, forward, init_mlp
from gvi.deep.replay import Batch, ReplayBuffer
from gvi.envs.control import ControlEnv, ControlTask, make_task
from gvi.exceptions import ConfigError, TrainingDiverged

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "return_mean", "return_std", "lambda", "lambda_prime", "td_max", "loss")


# --- coefficient tracker -----------------------------------------------------


@dataclass(frozen=True)
class LambdaTracker:
    lam: float = 10.0
    lam_prime: float = 10.0
    nu: float = 0.05
    nu_slow: float = 0.005
    alpha1: float = 2.0
    alpha2: float = 0.9

    def __post_init__(self):
        if not (self.lam > 0 and self.lam_prime > 0):
            raise ConfigError("lambda and lambda' must be positive")
        if not (0 < self.nu <= 1 and 0 < self.nu_slow <= 1):
            raise ConfigError("tracker rates must lie in (0, 1]")
        if self.alpha1 < 0 or not 0 < self.alpha2 <= 1:
            raise ConfigError("need alpha1 >= 0 and 0 < alpha2 <= 1")


def _move_toward(current: float, goal: float, rate: float) -> float:
    # current + rate (goal - current) is (1 - rate) current + rate goal, but is
    # exact when goal == current; rate 1 is a plain replacement
    return goal if rate == 1.0 else current + rate * (goal - current)


def update_lambdas(tracker: LambdaTracker, td_max: float) -> LambdaTracker:
    """lam' <- (1 - nu) lam' + nu max(alpha1 td_max, alpha2 lam), then
    lam <- (1 - nu_slow) lam + nu_slow lam' with the new lam'."""
    if not td_max >= 0:
        raise ValueError(f"td_max must be a nonnegative number, got {td_max}")
    goal = max(tracker.alpha1 * td_max, tracker.alpha2 * tracker.lam)
    lam_prime = _move_toward(tracker.lam_prime, goal, tracker.nu)
    lam = _move_toward(tracker.lam, lam_prime, tracker.nu_slow)
    return replace(tracker, lam=lam, lam_prime=lam_prime)


# --- targets -------------------------------------------------------------------


def log_softmax(q: np.ndarray) -> np.ndarray:
    z = q - q.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _target_parts(q_obs, q_next, actions, log_floor):
    """(clipped ln pi(a|s), <pi(s'), q(s') - ln pi(s')>) per batch entry."""
    rows = np.arange(len(actions))
    bonus = log_softmax(q_obs)[rows, actions]
    if log_floor is not None:
        bonus = np.maximum(bonus, log_floor)
    lp_next = log_softmax(q_next)
    boot = (np.exp(lp_next) * (q_next - lp_next)).sum(axis=1)
    return bonus, boot


def _combine(bonus, boot, batch: Batch, tracker: LambdaTracker, gamma: float):
    scale = tracker.lam / tracker.lam_prime
    return bonus + batch.rewards / tracker.lam_prime + scale * gamma * (1.0 - batch.terminated) * boot


def dgvi_target(batch: Batch, params: MlpParams, tracker: LambdaTracker, gamma: float,
                log_floor: float | None = -1.0, target_params: MlpParams | None = None) -> np.ndarray:
    """One regression target per transition; ``target_params`` defaults to ``params``."""
    src = params if target_params is None else target_params
    bonus, boot = _target_parts(forward(src, batch.obs), forward(src, batch.next_obs), batch.actions, log_floor)
    return _combine(bonus, boot, batch, tracker, gamma)


def batch_td_max(batch: Batch, params: MlpParams, tracker: LambdaTracker, gamma: float,
                 log_floor: float | None = -1.0, target_params: MlpParams | None = None) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    q_sa = forward(params, batch.obs)[np.arange(len(batch)), batch.actions]
    y = dgvi_target(batch, params, tracker, gamma, log_floor, target_params)
    return float(np.max(np.abs(q_sa - y)))


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class DeepConfig:
    algorithm: str = "dgvi"
    seed: int = 0
    total_steps: int = 50_000
    buffer_capacity: int = 50_000
    batch_size: int = 32
    learning_starts: int = 1_000
    lr: float = 1e-4
    gamma: float = 0.99
    hidden: tuple[int, ...] = (256, 256)
    alpha1: float = 2.0
    # Once the TD term stops binding, lam' settles near alpha2 * lam while the
    # slow lam barely moves, so every target bootstraps with gamma / alpha2.
    # That has to stay below 1; the tabular 0.9 diverges here.
    alpha2: float = 0.999
    nu: float = 0.05
    nu_slow: float = 0.005
    lambda_init: float = 10.0
    lambda_const: float = 10.0
    log_floor: float | None = -1.0
    eval_every: int = 300
    eval_episodes: int = 10
    exploration: str = "softmax"
    epsilon: float = 0.05
    target_network: bool = False
    polyak: float = 0.005
    dtype: str = "float32"

    def __post_init__(self):
        if self.algorithm not in ("dgvi", "mdqn"):
            raise ConfigError(f"unknown deep algorithm {self.algorithm!r}")
        if self.exploration not in ("softmax", "epsilon_greedy"):
            raise ConfigError(f"unknown exploration {self.exploration!r}")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigError("need 1 <= batch_size <= buffer_capacity")
        if self.total_steps < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("step budget, eval period and eval episodes must be positive")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.lambda_init <= 0 or self.lambda_const <= 0:
            raise ConfigError("coefficients must be positive")
        if not 0 <= self.epsilon <= 1 or not 0 < self.polyak <= 1:
            raise ConfigError("epsilon must lie in [0, 1] and polyak in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        # also validates the tracker fields
        self.initial_tracker()
        if self.algorithm == "dgvi" and self.alpha2 <= self.gamma:
            log.warning("alpha2=%g <= gamma=%g: targets bootstrap with factor gamma/alpha2 >= 1 "
                        "whenever the TD term is inactive; training is likely to diverge",
                        self.alpha2, self.gamma)

    def initial_tracker(self) -> LambdaTracker:
        lam = self.lambda_init if self.algorithm == "dgvi" else self.lambda_const
        return LambdaTracker(lam, lam, self.nu, self.nu_slow, self.alpha1, self.alpha2)


# --- training ------------------------------------------------------------------------


@dataclass
class TrainingLog:
    """Evaluation rows plus per-gradient-step tracker series.

    ``td_max`` and ``loss`` in a row are means over the gradient steps since
    the previous evaluation (NaN before learning starts).
    """

    rows: list[tuple] = field(default_factory=list)
    td_max: list[float] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    lam_prime: list[float] = field(default_factory=list)
    episode_returns: list[tuple[int, float]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[LOG_COLUMNS.index(name)] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            w.writerows(_fmt_row(r) for r in self.rows)

    def write_series_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("grad_step", "td_max", "lambda", "lambda_prime"))
            for i, row in enumerate(zip(self.td_max, self.lam, self.lam_prime)):
                w.writerow((i + 1, *map(repr, row)))


def _fmt_row(row):
    return (row[0], *(repr(float(x)) for x in row[1:]))


def evaluate_greedy(task: ControlTask, params: MlpParams, rng: np.random.Generator, episodes: int) -> np.ndarray:
    """Undiscounted returns of the argmax policy, all episodes stepped in lockstep."""
    state = task.initial_state(rng, episodes)
    returns = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    for _ in range(task.episode_cap):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        actions = np.argmax(forward(params, task.observe(state[idx])), axis=1)
        nxt, reward, terminated = task.dynamics(state[idx], actions)
        returns[idx] += reward
        state[idx] = nxt
        alive[idx[terminated]] = False
    return returns


class Trainer:
    """Owns every piece of mutable training state, so a checkpoint is a full snapshot."""

    def __init__(self, task: ControlTask, config: DeepConfig):
        self.task = task
        self.config = config
        dtype = np.dtype(config.dtype)
        init_ss, act_ss, replay_ss, env_ss = np.random.SeedSequence(config.seed).spawn(4)
        self.params = init_mlp(task.observation_dim, task.action_count, config.hidden,
                               np.random.default_rng(init_ss), dtype)
        self.target_params = self.params.copy() if config.target_network else None
        self.adam = AdamState.for_params(self.params, lr=config.lr)
        self._grads = None
        self.tracker = config.initial_tracker()
        self.buffer = ReplayBuffer(config.buffer_capacity, task.observation_dim, replay_ss, dtype)
        self.env = ControlEnv(task, env_ss)
        self.rng = np.random.default_rng(act_ss)
        self.obs = self.env.reset()
        self.steps = 0
        self.episode_return = 0.0
        self.log = TrainingLog()
        self._since_eval_td: list[float] = []
        self._since_eval_loss: list[float] = []

    @property
    def adaptive(self) -> bool:
        return self.config.algorithm == "dgvi"

    def act(self, obs) -> int:
        q = forward(self.params, obs[None, :])[0]
        A = q.shape[0]
        if self.config.exploration == "epsilon_greedy":
            if self.rng.random() < self.config.epsilon:
                return int(self.rng.integers(A))
            return int(np.argmax(q))
        p = np.exp(q - q.max())
        cdf = np.cumsum(p)
        return min(int(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right")), A - 1)

    def gradient_step(self) -> tuple[float, float]:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size)
        rows = np.arange(cfg.batch_size)
        q, cache = forward(self.params, batch.obs, return_cache=True)
        if self.target_params is None:
            q_obs_t, q_next = q, forward(self.params, batch.next_obs)
        else:
            q_obs_t, q_next = forward(self.target_params, batch.obs), forward(self.target_params, batch.next_obs)
        bonus, boot = _target_parts(q_obs_t, q_next, batch.actions, cfg.log_floor)
        q_sa = q[rows, batch.actions]
        td_max = float(np.max(np.abs(q_sa - _combine(bonus, boot, batch, self.tracker, cfg.gamma))))
        if not math.isfinite(td_max):
            raise TrainingDiverged(
                f"non-finite TD error at env step {self.steps} (lambda={self.tracker.lam}, "
                f"lambda'={self.tracker.lam_prime}); check the learning rate and coefficient settings")
        if self.adaptive:
            self.tracker = update_lambdas(self.tracker, td_max)
        diff = q_sa - _combine(bonus, boot, batch, self.tracker, cfg.gamma)
        loss = float(np.mean(diff * diff))
        grad_q = np.zeros_like(q)
        grad_q[rows, batch.actions] = 2.0 * diff / cfg.batch_size
        self._grads = backward(self.params, None, grad_q, cache, out=self._grads)
        adam_update(self.params, self._grads, self.adam)
        if self.target_params is not None:
            for t, p in zip(self.target_params.arrays(), self.params.arrays()):
                t += cfg.polyak * (p - t)
        return td_max, loss

    def evaluate(self) -> np.ndarray:
        # evaluation randomness depends only on (seed, evaluation index)
        rng = np.random.default_rng([self.config.seed, self.steps // self.config.eval_every])
        return evaluate_greedy(self.task, self.params, rng, self.config.eval_episodes)

    def run(self, until: int | None = None) -> TrainingLog:
        cfg = self.config
        stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
        start_learning = max(cfg.batch_size, cfg.learning_starts)
        while self.steps < stop:
            step = self.env.step(self.act(self.obs))
            self.buffer.add(step)
            self.episode_return += step.reward
            self.steps += 1
            if step.done_flag:
                self.log.episode_returns.append((self.steps, self.episode_return))
                self.episode_return = 0.0
                self.obs = self.env.reset()
            else:
                self.obs = step.next_observation
            if len(self.buffer) >= start_learning:
                td, loss = self.gradient_step()
                self.log.td_max.append(td)
                self.log.lam.append(self.tracker.lam)
                self.log.lam_prime.append(self.tracker.lam_prime)
                self._since_eval_td.append(td)
                self._since_eval_loss.append(loss)
            if self.steps % cfg.eval_every == 0:
                returns = self.evaluate()
                td = float(np.mean(self._since_eval_td)) if self._since_eval_td else math.nan
                loss = float(np.mean(self._since_eval_loss)) if self._since_eval_loss else math.nan
                self.log.rows.append((self.steps, float(returns.mean()), float(returns.std()),
                                      self.tracker.lam, self.tracker.lam_prime, td, loss))
                self._since_eval_td, self._since_eval_loss = [], []
        return self.log

    # --- checkpoints ---

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "task_id": self.task.task_id,
            "config": asdict(self.config),
            "steps": self.steps,
            "params": [a.copy() for a in self.params.arrays()],
            "target_params": None if self.target_params is None else [a.copy() for a in self.target_params.arrays()],
            "adam": self.adam.copy(),
            "tracker": asdict(self.tracker),
            "rng": self.rng.bit_generator.state,
            "buffer": self.buffer.get_state(),
            "env": self.env.get_state(),
            "obs": self.obs.copy(),
            "episode_return": self.episode_return,
            "log": TrainingLog(list(self.log.rows), list(self.log.td_max), list(self.log.lam),
                               list(self.log.lam_prime), list(self.log.episode_returns)),
            "pending": (list(self._since_eval_td), list(self._since_eval_loss)),
        }

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self.state_dict(), fh, protocol=pickle.HIGHEST_PROTOCOL)

    @classmethod
    def load(cls, path, task: ControlTask | None = None, **config_changes) -> "Trainer":
        """Restore a trainer; ``config_changes`` may extend ``total_steps`` only."""
        with open(path, "rb") as fh:
            state = pickle.load(fh)
        if not isinstance(state, dict) or state.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        if set(config_changes) - {"total_steps"}:
            raise ConfigError("only total_steps may change when resuming")
        cfg = dict(state["config"], **config_changes)
        cfg["hidden"] = tuple(cfg["hidden"])
        task = make_task(state["task_id"]) if task is None else task
        if task.task_id != state["task_id"]:
            raise ConfigError(f"checkpoint was written for task {state['task_id']!r}, not {task.task_id!r}")
        trainer = cls(task, DeepConfig(**cfg))
        trainer.params = MlpParams.from_arrays(state["params"])
        if state["target_params"] is not None:
            trainer.target_params = MlpParams.from_arrays(state["target_params"])
        trainer.adam = state["adam"]
        trainer.tracker = LambdaTracker(**state["tracker"])
        trainer.rng.bit_generator.state = state["rng"]
        trainer.buffer.set_state(state["buffer"])
        trainer.env.set_state(state["env"])
        trainer.obs = state["obs"]
        trainer.steps = state["steps"]
        trainer.episode_return = state["episode_return"]
        trainer.log = state["log"]
        trainer._since_eval_td, trainer._since_eval_loss = map(list, state["pending"])
        return trainer


def _train(task, config, checkpoint_path=None, checkpoint_every=None) -> TrainingLog:
    trainer = Trainer(task, config)
    if checkpoint_path is None:
        return trainer.run()
    every = checkpoint_every or config.total_steps
    while trainer.steps < config.total_steps:
        trainer.run(until=trainer.steps + every)
        trainer.save(Path(checkpoint_path))
    return trainer.log


def dgvi_train(task: ControlTask, config: DeepConfig, **kwargs) -> TrainingLog:
    return _train(task, replace(config, algorithm="dgvi"), **kwargs)


def mdqn_train(task: ControlTask, config: DeepConfig, **kwargs) -> TrainingLog:
    """Constant-coefficient baseline: lambda = lambda' = ``config.lambda_const`` throughout."""
    return _train(task, replace(config, algorithm="mdqn"), **kwargs)
