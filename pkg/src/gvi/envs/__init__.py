from gvi.envs.control import CARTPOLE, DISCRETE_PENDULUM, TASKS, ControlEnv, ControlTask, EpisodeStep, make_task
from gvi.envs.finite import random_mdp, two_state_mdp
from gvi.envs.maze import Maze, MazeSpec, build_maze, generate_maze, sample_rollout

__all__ = [
    "CARTPOLE",
    "DISCRETE_PENDULUM",
    "TASKS",
    "ControlEnv",
    "ControlTask",
    "EpisodeStep",
    "Maze",
    "MazeSpec",
    "build_maze",
    "generate_maze",
    "make_task",
    "random_mdp",
    "sample_rollout",
    "two_state_mdp",
]
