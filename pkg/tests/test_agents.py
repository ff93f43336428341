"""RL policy-bundle tests: action bounds, twin-critic rule, soft updates,
TD targets against hand-built transitions, tanh-Gaussian log-density via
numerical integration, and checkpoint round-trips."""

import numpy as np
import pytest

from tractfuse import agents, nn
from tractfuse.agents import (ACTION_DIM, PolicyBundle, ReplayBuffer, RlHyper,
                              sac_log_prob)
from tractfuse.env import STATE_DIM

RNG = np.random.default_rng(44)


def states(n):
    return RNG.normal(size=(n, STATE_DIM)).astype(np.float32)


def test_action_bounds(tiny_policies):
    s = states(16)
    rng = np.random.default_rng(1)
    for algo, p in tiny_policies.items():
        for mode in ("deterministic", "explore"):
            a = p.act(s, mode=mode, rng=rng)
            assert a.shape == (16, ACTION_DIM)
            assert np.all(a >= -1.0) and np.all(a <= 1.0)


def test_td3_sigma_zero_explore_equals_deterministic():
    p = PolicyBundle("td3", hyper=RlHyper(lr=1e-3, sigma=0.0, gamma=0.9), hidden=8)
    s = states(4)
    np.testing.assert_allclose(p.act(s, mode="explore", rng=np.random.default_rng(0)),
                               p.act(s, mode="deterministic"), atol=1e-12)


def test_explore_reproducible(tiny_policies):
    s = states(8)
    for p in tiny_policies.values():
        a1 = p.act(s, mode="explore", rng=np.random.default_rng(5))
        a2 = p.act(s, mode="explore", rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a1, a2)


def test_state_width_error(tiny_policies):
    with pytest.raises(ValueError, match=str(STATE_DIM)):
        tiny_policies["td3"].act(np.zeros((1, 10), dtype=np.float32))


def test_unknown_algo_rejected():
    with pytest.raises(ValueError, match="unknown"):
        PolicyBundle("ppo", hidden=8)


def test_critic_counts(tiny_policies):
    assert len(tiny_policies["ddpg"].critics) == 1
    assert len(tiny_policies["td3"].critics) == 2
    assert len(tiny_policies["sac"].critics) == 2


def test_q_value_twin_minimum():
    p = PolicyBundle("td3", hidden=8, seed=0)
    s, a = states(5), RNG.uniform(-1, 1, size=(5, 3)).astype(np.float32)
    x = np.concatenate([s, a], axis=1)
    q0 = agents._mlp_forward_np(p.critics[0], x)[:, 0]
    q1 = agents._mlp_forward_np(p.critics[1], x)[:, 0]
    np.testing.assert_allclose(p.q_value(s, a), np.minimum(q0, q1), rtol=1e-6)


def test_q_value_zero_weight_critic_is_zero():
    p = PolicyBundle("ddpg", hidden=8, seed=0)
    for layer in p.critics[0].layers:
        layer.w.data[...] = 0.0
        layer.b.data[...] = 0.0
    np.testing.assert_array_equal(p.q_value(states(3), np.zeros((3, 3))), 0.0)


def test_soft_update_exact():
    p = PolicyBundle("td3", hyper=RlHyper(lr=1e-3, sigma=0.1, gamma=0.9, tau=0.25),
                     hidden=8, seed=2)
    src = p.actor.layers[0].w.data.copy()
    dst = p.target_actor.layers[0].w.data.copy()
    p.soft_update()
    np.testing.assert_allclose(p.target_actor.layers[0].w.data,
                               0.75 * dst + 0.25 * src, rtol=1e-6)


def test_soft_update_tau_one_copies():
    p = PolicyBundle("sac", hidden=8, seed=3)
    p.soft_update(tau=1.0)
    for tc, c in zip(p.target_critics, p.critics):
        for lt, lc in zip(tc.layers, c.layers):
            np.testing.assert_allclose(lt.w.data, lc.w.data, rtol=1e-6)


# -- log-density of the squashed Gaussian -------------------------------------

def test_sac_log_prob_integrates_to_one():
    """Numerical quadrature oracle: per-dimension density integrates to 1."""
    mean, log_std = 0.3, np.log(0.5)
    a = np.linspace(-1 + 1e-6, 1 - 1e-6, 20001)
    lp = sac_log_prob(mean, log_std, a)
    integral = np.trapezoid(np.exp(lp), a)
    assert integral == pytest.approx(1.0, abs=1e-4)


def test_sac_sample_logp_matches_numpy_density():
    p = PolicyBundle("sac", hidden=8, seed=1)
    s = states(6)
    from tractfuse.autodiff import Tensor
    a, logp = agents._sac_sample(p, Tensor(s), np.random.default_rng(0))
    raw = agents._mlp_forward_np(p.actor, s)
    expect = sac_log_prob(raw, p.log_std.data, a.data).sum(axis=-1)
    np.testing.assert_allclose(logp.data, expect, rtol=1e-3, atol=1e-3)


# -- replay buffer ------------------------------------------------------------

def test_replay_ring_wraps():
    buf = ReplayBuffer(capacity=10)
    for i in range(3):
        n = 6
        buf.add_batch(states(n), np.zeros((n, 3), dtype=np.float32),
                      np.full(n, float(i), dtype=np.float32), states(n),
                      np.zeros(n, dtype=np.float32))
    assert buf.size == 10
    assert buf.idx == 8


def test_replay_sample_reproducible():
    buf = ReplayBuffer(capacity=50)
    buf.add_batch(states(30), RNG.normal(size=(30, 3)).astype(np.float32),
                  np.arange(30, dtype=np.float32), states(30),
                  np.zeros(30, dtype=np.float32))
    s1 = buf.sample(8, np.random.default_rng(7))
    s2 = buf.sample(8, np.random.default_rng(7))
    for a, b in zip(s1, s2):
        np.testing.assert_array_equal(a, b)


def test_replay_sample_capped_at_size():
    buf = ReplayBuffer(capacity=50)
    buf.add_batch(states(5), np.zeros((5, 3), dtype=np.float32),
                  np.zeros(5, dtype=np.float32), states(5), np.zeros(5, dtype=np.float32))
    out = buf.sample(20, np.random.default_rng(0))
    assert len(out[2]) == 5


# -- updates ------------------------------------------------------------------

def small_batch(n=12, reward=1.5, done=1.0):
    return (states(n), RNG.uniform(-1, 1, (n, 3)).astype(np.float32),
            np.full(n, reward, dtype=np.float32), states(n),
            np.full(n, done, dtype=np.float32))


def test_gamma_zero_target_is_reward():
    """With gamma=0 the critic regresses pure rewards: loss equals the
    hand-computed MSE against r."""
    p = PolicyBundle("ddpg", hyper=RlHyper(lr=0.0, sigma=0.1, gamma=0.0), hidden=8)
    batch = small_batch(done=0.0)
    opt = nn.AdamW(p.critic_params(), lr=0.0)
    loss = agents._update_critics(p, opt, batch, np.random.default_rng(0))
    s, a, r, _, _ = batch
    q = agents._mlp_forward_np(p.critics[0], np.concatenate([s, a], axis=1))[:, 0]
    assert loss == pytest.approx(float(np.mean((q - r) ** 2)), rel=1e-5)


def test_done_transition_target_is_reward_any_gamma():
    p = PolicyBundle("ddpg", hyper=RlHyper(lr=0.0, sigma=0.1, gamma=0.9), hidden=8)
    batch = small_batch(done=1.0)
    opt = nn.AdamW(p.critic_params(), lr=0.0)
    loss = agents._update_critics(p, opt, batch, np.random.default_rng(0))
    s, a, r, _, _ = batch
    q = agents._mlp_forward_np(p.critics[0], np.concatenate([s, a], axis=1))[:, 0]
    assert loss == pytest.approx(float(np.mean((q - r) ** 2)), rel=1e-5)


def test_zero_lr_is_noop():
    p = PolicyBundle("td3", hyper=RlHyper(lr=0.0, sigma=0.1, gamma=0.9), hidden=8)
    before = {k: v.data.copy() for k, v in
              {**p.actor_params(), **p.critic_params()}.items()}
    copt = nn.AdamW(p.critic_params(), lr=0.0)
    aopt = nn.AdamW(p.actor_params(), lr=0.0)
    batch = small_batch()
    agents._update_critics(p, copt, batch, np.random.default_rng(0))
    agents._update_actor(p, aopt, batch, np.random.default_rng(0))
    after = {**p.actor_params(), **p.critic_params()}
    for k, v in before.items():
        np.testing.assert_array_equal(after[k].data, v)


def test_actor_update_leaves_critics_unchanged():
    p = PolicyBundle("td3", hyper=RlHyper(lr=1e-2, sigma=0.1, gamma=0.9), hidden=8)
    critics_before = {k: v.data.copy() for k, v in p.critic_params().items()}
    aopt = nn.AdamW(p.actor_params(), lr=1e-2)
    agents._update_actor(p, aopt, small_batch(), np.random.default_rng(0))
    for k, v in p.critic_params().items():
        np.testing.assert_array_equal(v.data, critics_before[k])
    # and critic grads were cleared, so a later critic step is unaffected
    assert all(v.grad is None for v in p.critic_params().values())


def test_policy_checkpoint_roundtrip(tmp_path, tiny_policies):
    s = states(4)
    for algo, p in tiny_policies.items():
        path = tmp_path / f"{algo}.ckp"
        p.save(path)
        loaded = PolicyBundle.load(path)
        assert loaded.algo == algo and loaded.hidden == p.hidden
        np.testing.assert_array_equal(loaded.act(s), p.act(s))
        np.testing.assert_array_equal(
            loaded.q_value(s, np.zeros((4, 3), dtype=np.float32)),
            p.q_value(s, np.zeros((4, 3), dtype=np.float32)))


def test_training_learns_on_tube(tube_phantom, env_cfg):
    """Short desk-style training beats the uniform-random baseline."""
    schedule = agents.RlSchedule(batches=3, episodes_per_batch=32,
                                 grad_steps_per_batch=60, batch_size=128,
                                 replay_capacity=20000)
    p = PolicyBundle("td3", hyper=RlHyper(lr=1e-3, sigma=0.334, gamma=0.776),
                     hidden=32, seed=0)
    log = agents.train_policy(p, tube_phantom, ["tube"], env_cfg, schedule, seed=1)
    assert len(log["batch_mean_episode_reward"]) == 3
    base = agents.random_baseline(tube_phantom, "tube", env_cfg, seed=2)
    trained = agents.policy_mean_step_reward(p, tube_phantom, "tube", env_cfg, seed=2)
    assert trained > base
