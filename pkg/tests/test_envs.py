import math

import numpy as np
import pytest

from gvi.envs import CARTPOLE, DISCRETE_PENDULUM, ControlEnv, MazeSpec, build_maze, generate_maze, make_task, sample_rollout
from gvi.envs.control import reset, step
from gvi.envs.finite import random_mdp, two_state_mdp
from gvi.exceptions import InvalidAction, InvalidMdp, UnreachableGoal
from gvi.mdp import evaluate_policy_exact, solve_optimal


# --- mazes -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_maze_rows_are_stochastic(seed):
    mdp = generate_maze(MazeSpec(rng_seed=seed))
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
    assert mdp.num_actions == 4


def test_maze_generation_is_deterministic():
    a, b = generate_maze(MazeSpec(rng_seed=42)), generate_maze(MazeSpec(rng_seed=42))
    assert a.to_json() == b.to_json()
    assert a.transition.tobytes() == b.transition.tobytes()


def test_open_maze_adjacent_goal_value():
    spec = MazeSpec(width=3, height=3, start_cell=(0, 0), goal_cell=(0, 1), wall_density=0.0)
    maze = build_maze(spec)
    q, _ = solve_optimal(maze.mdp)
    q_right = q[maze.start_state, 1]
    assert q_right >= 0.9 * spec.gamma * spec.goal_reward
    # direct oracle: succeed immediately (0.9) or slip and try again later
    assert q_right <= spec.goal_reward


def test_maze_structure():
    maze = build_maze(MazeSpec(rng_seed=3))
    P, R = maze.mdp.transition, maze.mdp.reward
    goal, absorbing = maze.goal_state, maze.absorbing_state
    assert np.all(P[goal, :, absorbing] == 1.0)
    assert np.all(P[absorbing, :, absorbing] == 1.0)
    assert np.all(R[absorbing] == 0.0) and np.all(R[goal] == 0.0)
    for s in range(maze.mdp.num_states - 1):
        if s != goal:
            np.testing.assert_allclose(R[s], P[s, :, goal], atol=1e-15)
    assert maze.mdp.initial_dist[maze.start_state] == 1.0


def test_maze_slip_split_and_blocked_moves():
    spec = MazeSpec(width=3, height=3, start_cell=(1, 1), goal_cell=(2, 2),
                    wall_mask=np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]], dtype=bool))
    maze = build_maze(spec)
    s = maze.state_of[(1, 1)]
    up = maze.mdp.transition[s, 0]
    # 'up' hits the wall and stays; the other three directions get 0.1/3 each
    assert up[s] == pytest.approx(0.9)
    for cell in ((1, 2), (2, 1), (1, 0)):
        assert up[maze.state_of[cell]] == pytest.approx(0.1 / 3)


@pytest.mark.parametrize("seed", range(5))
def test_maze_start_value_bounds(seed):
    maze = build_maze(MazeSpec(rng_seed=seed))
    q, _ = solve_optimal(maze.mdp)
    v0 = q[maze.start_state].max()
    assert 0 < v0 <= 1 / (1 - maze.mdp.gamma)
    assert v0 <= maze.spec.goal_reward


def test_maze_unreachable_goal():
    blocked = np.zeros((3, 3), dtype=bool)
    blocked[1, :] = True
    with pytest.raises(UnreachableGoal):
        build_maze(MazeSpec(width=3, height=3, start_cell=(0, 0), goal_cell=(2, 2), wall_mask=blocked))
    with pytest.raises(UnreachableGoal):
        build_maze(MazeSpec(wall_density=0.95, max_retries=3))


def test_maze_spec_validation():
    with pytest.raises(InvalidMdp):
        MazeSpec(success_prob=0.8, slip_prob=0.1)
    with pytest.raises(InvalidMdp):
        MazeSpec(goal_cell=(7, 7))


def test_maze_render_and_json():
    maze = build_maze(MazeSpec(rng_seed=1))
    rows = maze.render().splitlines()
    assert len(rows) == 5 and all(len(r) == 5 for r in rows)
    assert rows[0][0] == "S" and rows[4][4] == "G"
    assert set("".join(rows)) <= set("#SG.")
    assert MazeSpec.from_dict(maze.spec.to_dict()) == maze.spec


def test_sample_rollout_matches_exact_value_roughly():
    maze = build_maze(MazeSpec(rng_seed=0))
    _, pi = solve_optimal(maze.mdp)
    rng = np.random.default_rng(0)
    mean = np.mean([sample_rollout(maze, pi, rng) for _ in range(2000)])
    exact = evaluate_policy_exact(pi, maze.mdp)[maze.start_state].max()
    # the 25-step cap only removes probability mass, so sampled returns sit at or below the exact value
    assert mean <= exact + 0.03
    assert mean >= exact - 0.15


# --- two-state chain -----------------------------------------------------------


@pytest.mark.parametrize("k, loop", [(100, 0.99), (2, 0.5)])
def test_two_state_loop_probability(k, loop):
    mdp, errors = two_state_mdp(k)
    assert mdp.transition[0, 0, 0] == pytest.approx(loop, abs=1e-15)
    assert errors.period == k and errors.kind == "periodic_uniform" and errors.magnitude == k


def test_two_state_optimal_value_closed_form():
    gamma = 0.99
    mdp, _ = two_state_mdp(100, gamma)
    q, _ = solve_optimal(mdp, tol=1e-12)
    # v0 = -1/2 + gamma (0.99 v0 + 0.01 v1), v1 = gamma v0
    v0 = -0.5 / (1 - gamma * 0.99 - gamma**2 * 0.01)
    np.testing.assert_allclose(q[:, 0], [v0, gamma * v0], rtol=1e-10)


def test_two_state_rejects_small_k():
    with pytest.raises(ValueError):
        two_state_mdp(1)


def test_random_mdp_is_valid_and_seeded():
    a, b = random_mdp(7, 3, seed=5), random_mdp(7, 3, seed=5)
    assert a.to_json() == b.to_json()
    assert np.all(a.reward >= 0) and np.all(a.reward <= 1)


# --- control tasks -----------------------------------------------------------------


def test_cartpole_reset_band_and_determinism():
    for seed in range(50):
        obs = reset(CARTPOLE, seed)
        assert obs.shape == (4,) and np.all(np.abs(obs) <= 0.05)
        assert np.array_equal(obs, reset(CARTPOLE, seed))


def test_pendulum_reset_domain():
    for seed in range(50):
        obs = reset(DISCRETE_PENDULUM, seed)
        theta = math.atan2(obs[1], obs[0])
        assert -math.pi <= theta <= math.pi and abs(obs[2]) <= 1.0
        assert obs[0] ** 2 + obs[1] ** 2 == pytest.approx(1.0)


def test_cartpole_alternating_actions_survive():
    env = ControlEnv(CARTPOLE)
    env.reset(0)
    env.state = np.zeros(4)
    for t in range(100):
        st = env.step(t % 2)
        if st.done_flag:
            break
    assert t + 1 > 20


def test_cartpole_terminates_past_angle_threshold():
    st = step(CARTPOLE, np.array([0.0, 0.0, 0.25, 0.0]), 1)
    assert st.done_flag and st.terminated and st.reward == 1.0


def test_cartpole_episode_cap_is_truncation():
    env = ControlEnv(CARTPOLE)
    env.reset(0)
    env.state, env.t = np.zeros(4), CARTPOLE.episode_cap - 1
    st = env.step(0)
    assert st.done_flag and not st.terminated


def test_pendulum_bottom_rest_reward():
    st = step(DISCRETE_PENDULUM, np.array([math.pi, 0.0]), 2)
    assert DISCRETE_PENDULUM.torques[2] == 0.0
    assert st.reward == pytest.approx(-math.pi**2, abs=1e-12)


def test_pendulum_torques_span_range():
    np.testing.assert_allclose(DISCRETE_PENDULUM.torques, [-2, -1, 0, 1, 2])
    assert DISCRETE_PENDULUM.action_count == 5


def test_pendulum_energy_drift_small_without_torque():
    # the semi-implicit Euler update makes energy oscillate a few percent within a
    # swing; drift is the net change per step, which must stay far below 1%
    task = DISCRETE_PENDULUM
    scale = task.m * task.g * task.l
    state = task.initial_state(np.random.default_rng(0), 64)
    e0 = task.energy(state)
    steps = 2000
    excursion = np.zeros(64)
    for _ in range(steps):
        state, _, _ = task.dynamics(state, np.full(64, 2))
        excursion = np.maximum(excursion, np.abs(task.energy(state) - e0) / scale)
    drift_per_step = np.abs(task.energy(state) - e0) / scale / steps
    assert np.all(drift_per_step < 0.01)
    assert np.all(drift_per_step < 1e-4)
    assert np.all(excursion < 0.1)


def test_step_determinism_and_invalid_action():
    s = np.array([0.01, -0.02, 0.03, 0.0])
    a, b = step(CARTPOLE, s, 1), step(CARTPOLE, s, 1)
    assert np.array_equal(a.next_observation, b.next_observation) and a.reward == b.reward
    with pytest.raises(InvalidAction):
        step(CARTPOLE, s, 2)
    with pytest.raises(InvalidAction):
        step(DISCRETE_PENDULUM, np.zeros(2), -1)


def test_env_state_snapshot_round_trip():
    env = ControlEnv(DISCRETE_PENDULUM, seed=3)
    env.reset()
    env.step(4)
    snap = env.get_state()
    first = [env.step(a).next_observation for a in (0, 1, 2)] + [env.reset()]
    env.set_state(snap)
    second = [env.step(a).next_observation for a in (0, 1, 2)] + [env.reset()]
    for x, y in zip(first, second):
        assert np.array_equal(x, y)


def test_batched_dynamics_match_single():
    rng = np.random.default_rng(1)
    for task in (CARTPOLE, DISCRETE_PENDULUM):
        states = task.initial_state(rng, 8)
        actions = rng.integers(0, task.action_count, 8)
        nxt, rew, term = task.dynamics(states, actions)
        for i in range(8):
            n1, r1, t1 = task.dynamics(states[i], actions[i])
            assert np.array_equal(n1, nxt[i]) and r1 == rew[i] and t1 == term[i]


def test_make_task_unknown():
    assert make_task("cartpole") is CARTPOLE
    with pytest.raises(ValueError):
        make_task("lunar_lander")
