import math
from dataclasses import dataclass, replace

import numpy as np
import pytest

from gvi.deep.adam import AdamState, adam_update
from gvi.deep.dgvi import (
    DeepConfig,
    LambdaTracker,
    Trainer,
    batch_td_max,
    dgvi_target,
    dgvi_train,
    mdqn_train,
    update_lambdas,
)
from gvi.deep.mlp import MlpParams, backward, forward, init_mlp
from gvi.deep.replay import Batch, ReplayBuffer
from gvi.envs.control import CARTPOLE, CartPole, EpisodeStep
from gvi.exceptions import ConfigError, ShapeMismatch, TrainingDiverged
from gvi.tabular import update_lambda_tabular


def random_batch(rng, n=8, obs_dim=3, actions=4, dtype=np.float64, terminal_every=3):
    return Batch(
        obs=rng.normal(size=(n, obs_dim)).astype(dtype),
        actions=rng.integers(0, actions, n),
        rewards=rng.normal(size=n).astype(dtype),
        next_obs=rng.normal(size=(n, obs_dim)).astype(dtype),
        terminated=(np.arange(n) % terminal_every == 0).astype(dtype) if terminal_every else np.zeros(n, dtype),
    )


def small_net(seed=0, hidden=(16, 16), dtype=np.float64, in_dim=3, out_dim=4):
    return init_mlp(in_dim, out_dim, hidden, np.random.default_rng(seed), dtype)


# --- network -------------------------------------------------------------------------


def test_zero_weights_give_zero_output():
    p = small_net()
    zero = MlpParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
    assert not forward(zero, np.random.default_rng(0).normal(size=(5, 3))).any()


def test_single_identity_layer():
    p = MlpParams([np.eye(4)], [np.zeros(4)])
    x = np.random.default_rng(1).normal(size=(6, 4))
    np.testing.assert_array_equal(forward(p, x), x)


def test_forward_is_deterministic_and_seeded():
    x = np.random.default_rng(2).normal(size=(7, 3)).astype(np.float32)
    a, b = init_mlp(3, 2, rng=np.random.default_rng(9)), init_mlp(3, 2, rng=np.random.default_rng(9))
    assert forward(a, x).tobytes() == forward(b, x).tobytes() == forward(a, x).tobytes()
    assert forward(a, x).shape == (7, 2) and forward(a, x).dtype == np.float32


def test_shape_errors():
    p = small_net()
    with pytest.raises(ShapeMismatch):
        forward(p, np.zeros((2, 5)))
    with pytest.raises(ShapeMismatch):
        forward(p, np.zeros(3))
    with pytest.raises(ShapeMismatch):
        backward(p, np.zeros((2, 3)), np.zeros((3, 4)))
    with pytest.raises(ShapeMismatch):
        MlpParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ShapeMismatch):
        MlpParams([np.zeros((3, 4))], [np.zeros(3)])


def _loss(params, x, targets, actions):
    q = forward(params, x)
    d = q[np.arange(len(actions)), actions] - targets
    return float(np.mean(d * d))


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp(3, 4, (256, 256), rng, np.float64)
    x, targets, actions = rng.normal(size=(4, 3)), rng.normal(size=4), rng.integers(0, 4, 4)
    q = forward(p, x)
    grad_q = np.zeros_like(q)
    rows = np.arange(4)
    grad_q[rows, actions] = 2 * (q[rows, actions] - targets) / 4
    grads = backward(p, x, grad_q)
    h = 1e-5
    for arr, g in zip(p.arrays(), grads.arrays()):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        # bias coordinates of dead units have exactly zero gradient; sample live ones too
        idx = rng.choice(flat.size, size=min(10, flat.size), replace=False)
        idx = np.concatenate([idx, np.argsort(-np.abs(gflat))[:5]])
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = _loss(p, x, targets, actions)
            flat[i] = orig - h
            down = _loss(p, x, targets, actions)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            assert abs(fd - gflat[i]) / denom < 1e-4


def test_backward_zero_and_linearity():
    rng = np.random.default_rng(3)
    p, x = small_net(), rng.normal(size=(5, 3))
    g = rng.normal(size=(5, 4))
    assert all(not a.any() for a in backward(p, x, np.zeros((5, 4))).arrays())
    one, two = backward(p, x, g), backward(p, x, 2 * g)
    for a, b in zip(one.arrays(), two.arrays()):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)
    _, cache = forward(p, x, return_cache=True)
    for a, b in zip(one.arrays(), backward(p, x, g, cache).arrays()):
        np.testing.assert_array_equal(a, b)


def test_init_bounds():
    p = init_mlp(4, 2, (256, 256), np.random.default_rng(0))
    for w, b in zip(p.weights, p.biases):
        bound = 1 / math.sqrt(w.shape[0])
        assert np.abs(w).max() <= bound and np.abs(b).max() <= bound
    assert [w.shape for w in p.weights] == [(4, 256), (256, 256), (256, 2)]


# --- optimizer -----------------------------------------------------------------


def test_adam_first_step_moves_by_lr_times_sign():
    p = MlpParams([np.array([[1.0, -2.0]])], [np.array([0.5, 0.0])])
    g = MlpParams([np.array([[3.0, -0.1]])], [np.array([0.0, 2.0])])
    state = AdamState.for_params(p, lr=0.01)
    adam_update(p, g, state)
    np.testing.assert_allclose(p.weights[0], [[0.99, -1.99]], atol=1e-9)
    np.testing.assert_allclose(p.biases[0], [0.5, -0.01], atol=1e-9)
    assert state.step == 1


def test_adam_minimizes_a_quadratic():
    p = MlpParams([np.array([[4.0]])], [np.array([-3.0])])
    state = AdamState.for_params(p, lr=0.05)
    for _ in range(2000):
        adam_update(p, MlpParams([2 * p.weights[0]], [2 * p.biases[0]]), state)
    assert abs(p.weights[0][0, 0]) < 1e-2 and abs(p.biases[0][0]) < 1e-2


# --- targets and TD errors -------------------------------------------------------------


def _zero_net(in_dim=3, out_dim=2):
    return MlpParams([np.zeros((in_dim, out_dim))], [np.zeros(out_dim)])


def test_uniform_policy_target():
    rng = np.random.default_rng(0)
    batch = random_batch(rng, actions=2, terminal_every=None)
    for lam in (0.5, 10.0):
        y = dgvi_target(batch, _zero_net(), LambdaTracker(lam, lam), 0.9)
        expected = -math.log(2) + batch.rewards / lam + 0.9 * math.log(2)
        np.testing.assert_allclose(y, expected, atol=1e-12)
    # with four actions the floor bites: -ln 4 < -1
    batch4 = random_batch(rng, actions=4, terminal_every=None)
    y = dgvi_target(batch4, _zero_net(3, 4), LambdaTracker(1.0, 1.0), 0.9, log_floor=None)
    np.testing.assert_allclose(y, batch4.rewards + (0.9 - 1) * math.log(4), atol=1e-12)
    y = dgvi_target(batch4, _zero_net(3, 4), LambdaTracker(1.0, 1.0), 0.9)
    np.testing.assert_allclose(y, -1 + batch4.rewards + 0.9 * math.log(4), atol=1e-12)


def test_large_lambda_prime_suppresses_bootstrap():
    rng = np.random.default_rng(1)
    batch, p = random_batch(rng, terminal_every=None), small_net(1)
    q = forward(p, batch.obs)
    lp = q - q.max(axis=1, keepdims=True)
    lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
    bonus = np.maximum(lp[np.arange(len(batch)), batch.actions], -1.0)
    y = dgvi_target(batch, p, LambdaTracker(lam=1.0, lam_prime=1e6), 0.99)
    assert np.max(np.abs(y - bonus)) < 1e-4
    # and the bootstrap coefficient is exactly lam / lam'
    full = dgvi_target(batch, p, LambdaTracker(2.0, 2.0), 0.99)
    half = dgvi_target(batch, p, LambdaTracker(1.0, 2.0), 0.99)
    boot_full = full - bonus - batch.rewards / 2.0
    boot_half = half - bonus - batch.rewards / 2.0
    np.testing.assert_allclose(boot_half, 0.5 * boot_full, atol=1e-12)


def _straight_line_target(batch, params, lam, lam_prime, gamma, floor):
    """Per-transition loop written independently of the vectorized code."""
    out = []
    for i in range(len(batch)):
        def policy_logs(x):
            h = x
            for k, (w, b) in enumerate(zip(params.weights, params.biases)):
                h = h @ w + b
                if k < len(params.weights) - 1:
                    h = np.where(h > 0, h, 0.0)
            z = [float(v) for v in h]
            m = max(z)
            lse = m + math.log(sum(math.exp(v - m) for v in z))
            return z, [v - lse for v in z]
        _, logs = policy_logs(batch.obs[i])
        bonus = logs[batch.actions[i]]
        if floor is not None and bonus < floor:
            bonus = floor
        qn, logs_n = policy_logs(batch.next_obs[i])
        boot = sum(math.exp(l) * (qv - l) for qv, l in zip(qn, logs_n))
        cont = 1.0 - batch.terminated[i]
        out.append(bonus + batch.rewards[i] / lam_prime + (lam / lam_prime) * gamma * cont * boot)
    return np.array(out)


@pytest.mark.parametrize("floor", [-1.0, None])
def test_target_matches_straight_line_oracle(floor):
    rng = np.random.default_rng(5)
    for seed in range(5):
        batch, p = random_batch(rng, n=16), small_net(seed)
        lam, lam_prime = rng.uniform(0.5, 20, size=2)
        y = dgvi_target(batch, p, LambdaTracker(lam, lam_prime), 0.97, log_floor=floor)
        np.testing.assert_allclose(y, _straight_line_target(batch, p, lam, lam_prime, 0.97, floor), atol=1e-12)


def test_terminal_transitions_drop_bootstrap():
    rng = np.random.default_rng(6)
    batch = random_batch(rng, terminal_every=1)
    p = small_net(2)
    a = dgvi_target(batch, p, LambdaTracker(3.0, 3.0), 0.9)
    b = dgvi_target(batch, p, LambdaTracker(3.0, 3.0), 0.1)
    np.testing.assert_array_equal(a, b)


def test_batch_td_max():
    rng = np.random.default_rng(7)
    batch, p = random_batch(rng, n=12), small_net(3)
    tracker = LambdaTracker(4.0, 5.0)
    y = _straight_line_target(batch, p, 4.0, 5.0, 0.95, -1.0)
    q = forward(p, batch.obs)[np.arange(12), batch.actions]
    assert batch_td_max(batch, p, tracker, 0.95) == pytest.approx(max(abs(q - y)), abs=1e-12)
    single = Batch(batch.obs[:1], batch.actions[:1], batch.rewards[:1], batch.next_obs[:1], batch.terminated[:1])
    assert batch_td_max(single, p, tracker, 0.95) == pytest.approx(abs(q[0] - y[0]), abs=1e-12)
    with pytest.raises(ValueError):
        batch_td_max(Batch(batch.obs[:0], batch.actions[:0], batch.rewards[:0], batch.next_obs[:0],
                           batch.terminated[:0]), p, tracker, 0.95)


def test_td_max_zero_when_q_equals_target():
    # a zero network with two actions, all transitions terminal, rewards ln 2 * lam:
    # q = 0 and y = -ln 2 + ln 2 = 0
    lam = 3.0
    batch = Batch(np.zeros((4, 3)), np.array([0, 1, 0, 1]), np.full(4, math.log(2) * lam),
                  np.zeros((4, 3)), np.ones(4))
    assert batch_td_max(batch, _zero_net(), LambdaTracker(lam, lam), 0.99) == pytest.approx(0.0, abs=1e-15)


# --- coefficient tracker ----------------------------------------------------------------


def test_tracker_examples():
    t = update_lambdas(LambdaTracker(10.0, 10.0, nu=1.0, nu_slow=1.0, alpha1=2.0, alpha2=0.9), 0.0)
    assert t.lam_prime == 9.0 and t.lam == 9.0
    t = update_lambdas(LambdaTracker(10.0, 10.0, nu=1.0, nu_slow=1.0), 7.0)
    assert t.lam_prime == 14.0 and t.lam == 14.0
    # order: lam' first, then lam from the new lam'
    t = update_lambdas(LambdaTracker(10.0, 20.0, nu=0.5, nu_slow=0.5), 0.0)
    assert t.lam_prime == pytest.approx(14.5) and t.lam == pytest.approx(12.25)
    with pytest.raises(ValueError):
        update_lambdas(LambdaTracker(), -1.0)
    with pytest.raises(ValueError):
        update_lambdas(LambdaTracker(), math.nan)


def test_tracker_with_unit_rates_is_the_tabular_rule():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        lam = float(rng.uniform(1e-3, 100))
        td = float(rng.exponential(10)) if rng.random() < 0.7 else 0.0
        a1, a2 = float(rng.uniform(0, 5)), float(rng.uniform(0.01, 1))
        t = update_lambdas(LambdaTracker(lam, float(rng.uniform(1e-3, 100)), 1.0, 1.0, a1, a2), td)
        expected = update_lambda_tabular(td, lam, a1, a2)
        assert t.lam_prime == expected and t.lam == expected


def test_tracker_fixed_point():
    t = LambdaTracker(10.0, 10.0, nu=0.1, nu_slow=0.1, alpha1=2.0, alpha2=0.9)
    for _ in range(1000):
        t = update_lambdas(t, 30.0)
    # alpha1 td dominates: both settle at 60
    assert t.lam_prime == pytest.approx(60.0, rel=1e-9) and t.lam == pytest.approx(60.0, rel=1e-9)
    t = LambdaTracker(10.0, 10.0, nu=0.1, nu_slow=0.1, alpha1=2.0, alpha2=0.9)
    for _ in range(1000):
        t = update_lambdas(t, 0.0)
    # only the geometric floor remains: lam' tracks 0.9 lam and both shrink by a
    # factor (1 - 0.1 * 0.1)-ish per step, staying positive
    assert 0 < t.lam_prime < t.lam < 10.0 * 0.995**1000


def test_default_rates_contract_at_rest():
    # with no TD signal lam' drops to alpha2 * lam within a few hundred steps
    # while lam decays slowly; the bootstrap factor gamma * lam / lam' must stay
    # below one there or the targets expand on every step
    cfg = DeepConfig()
    t = cfg.initial_tracker()
    for _ in range(2000):
        t = update_lambdas(t, 0.0)
    assert t.lam_prime == pytest.approx(cfg.alpha2 * t.lam, rel=1e-3)
    assert cfg.gamma * t.lam / t.lam_prime < 1
    tab = replace(cfg, alpha2=0.9).initial_tracker()
    for _ in range(2000):
        tab = update_lambdas(tab, 0.0)
    assert cfg.gamma * tab.lam / tab.lam_prime > 1.08


def test_small_alpha2_warns(caplog):
    with caplog.at_level("WARNING", logger="gvi.deep.dgvi"):
        DeepConfig(alpha2=0.9)
    assert "likely to diverge" in caplog.text
    caplog.clear()
    with caplog.at_level("WARNING", logger="gvi.deep.dgvi"):
        DeepConfig(algorithm="mdqn", alpha2=0.9)
        DeepConfig()
    assert not caplog.text


def test_tracker_positivity_and_validation():
    rng = np.random.default_rng(1)
    t = LambdaTracker()
    for _ in range(5000):
        t = update_lambdas(t, float(rng.exponential(5)))
        assert t.lam > 0 and t.lam_prime > 0
    for bad in (dict(lam=0.0), dict(lam_prime=-1.0), dict(nu=0.0), dict(nu_slow=1.5), dict(alpha2=0.0),
                dict(alpha1=-1.0)):
        with pytest.raises(ConfigError):
            LambdaTracker(**bad)


# --- replay -----------------------------------------------------------------------


def _step(i, obs_dim=2):
    return EpisodeStep(np.full(obs_dim, float(i)), i % 3, float(i), np.full(obs_dim, i + 0.5), False, i % 5 == 0)


def test_replay_ring_and_sampling():
    buf = ReplayBuffer(4, 2, seed=0)
    with pytest.raises(ValueError):
        buf.sample(1)
    for i in range(6):
        buf.add(_step(i))
    assert len(buf) == 4
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0, 5.0]
    b = Batch(*(np.concatenate(x) for x in zip(*(
        (s.obs, s.actions, s.rewards, s.next_obs, s.terminated) for s in (buf.sample(4) for _ in range(16))))))
    assert set(b.rewards.tolist()) <= {2.0, 3.0, 4.0, 5.0}
    np.testing.assert_array_equal(b.obs[:, 0], b.rewards)
    np.testing.assert_array_equal(b.terminated, (b.rewards % 5 == 0).astype(float))
    with pytest.raises(ValueError):
        buf.sample(5)


def test_replay_state_round_trip():
    buf = ReplayBuffer(8, 2, seed=3)
    for i in range(5):
        buf.add(_step(i))
    snap = buf.get_state()
    first = buf.sample(4).rewards.copy()
    other = ReplayBuffer(8, 2, seed=99)
    other.set_state(snap)
    np.testing.assert_array_equal(other.sample(4).rewards, first)


# --- training ---------------------------------------------------------------------------

FAST = DeepConfig(total_steps=900, buffer_capacity=2000, learning_starts=200, hidden=(32, 32),
                  eval_every=300, eval_episodes=2)


def test_config_validation():
    for bad in (dict(algorithm="dqn"), dict(exploration="boltzmann"), dict(gamma=1.0), dict(batch_size=0),
                dict(nu=0.0), dict(lambda_init=-1.0), dict(dtype="float16")):
        with pytest.raises(ConfigError):
            replace(FAST, **bad)


def test_training_is_deterministic():
    a = dgvi_train(CARTPOLE, FAST)
    b = dgvi_train(CARTPOLE, FAST)
    assert a.rows == b.rows and a.td_max == b.td_max and a.lam == b.lam
    assert len(a.rows) == 3 and len(a.td_max) == 900 - 199


def test_reduction_to_constant_coefficient_baseline():
    frozen = replace(FAST, alpha1=0.0, alpha2=1.0, lambda_init=7.0, lambda_const=7.0)
    a = dgvi_train(CARTPOLE, frozen)
    b = mdqn_train(CARTPOLE, frozen)
    assert a.rows == b.rows and a.td_max == b.td_max
    assert set(a.lam) == {7.0} and set(a.lam_prime) == {7.0}


def test_baseline_keeps_lambda_fixed():
    log = mdqn_train(CARTPOLE, replace(FAST, lambda_const=3.0))
    assert set(log.lam) == {3.0} and set(log.column("lambda")) == {3.0}


@pytest.mark.parametrize("target_network", [False, True])
def test_checkpoint_resume_matches_uninterrupted(tmp_path, target_network):
    cfg = replace(FAST, target_network=target_network, exploration="epsilon_greedy")
    full = Trainer(CARTPOLE, cfg).run()
    t = Trainer(CARTPOLE, cfg)
    t.run(until=450)
    t.save(tmp_path / "ck.pkl")
    resumed = Trainer.load(tmp_path / "ck.pkl").run()
    assert resumed.rows == full.rows and resumed.td_max == full.td_max
    with pytest.raises(ConfigError):
        Trainer.load(tmp_path / "ck.pkl", lr=1.0)


def test_checkpointed_training_writes_final_state(tmp_path):
    path = tmp_path / "run.pkl"
    log = dgvi_train(CARTPOLE, FAST, checkpoint_path=path, checkpoint_every=300)
    restored = Trainer.load(path)
    assert restored.steps == 900 and restored.log.rows == log.rows


def test_bad_checkpoint(tmp_path):
    import pickle

    path = tmp_path / "x.pkl"
    path.write_bytes(pickle.dumps({"version": 999}))
    with pytest.raises(ConfigError):
        Trainer.load(path)


@dataclass(frozen=True)
class ZeroRewardCartPole(CartPole):
    task_id: str = "zero_reward_cartpole"

    def dynamics(self, state, action):
        nxt, reward, terminated = super().dynamics(state, action)
        return nxt, np.zeros_like(reward), terminated


def test_zero_reward_task_stays_bounded():
    task = ZeroRewardCartPole()
    t = Trainer(task, replace(FAST, total_steps=3000))
    log = t.run()
    q = forward(t.params, np.random.default_rng(0).uniform(-0.05, 0.05, size=(64, 4)))
    assert np.isfinite(q).all() and np.abs(q).max() < 50
    assert all(r[1] == 0.0 for r in log.rows)
    # without rewards the errors are small and the floor pulls lambda down from its start
    assert log.lam[-1] < 10.0 and min(log.lam) > 0


def test_non_finite_td_aborts():
    t = Trainer(CARTPOLE, FAST)
    t.run(until=300)
    t.params.weights[-1][:] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite TD"):
        t.run()


def test_float64_training_runs():
    log = dgvi_train(CARTPOLE, replace(FAST, dtype="float64", total_steps=600))
    assert len(log.rows) == 2 and all(np.isfinite(log.td_max))


def test_softmax_exploration_frequencies():
    t = Trainer(CARTPOLE, FAST)
    t.params = MlpParams([np.zeros((4, 2))], [np.array([0.0, math.log(3.0)])])
    picks = [t.act(np.zeros(4)) for _ in range(4000)]
    assert np.mean(picks) == pytest.approx(0.75, abs=0.03)
