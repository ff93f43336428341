"""Tracking-environment tests: state layout, alignment-reward oracle
(independent straight-line evaluation), and termination semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tractfuse.env import (EnvConfig, EnvError, REASON_LEFT_MASK,
                           REASON_MAX_STEPS, REASON_NONE, REASON_SHARP_ANGLE,
                           STATE_DIM, BatchTracker, TrackingEnv, reward)

RNG = np.random.default_rng(21)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def reward_oracle(action, prev_dir, peaks):
    """Independent straight-line transcription of the alignment reward."""
    a = unit(action)
    if len(peaks) == 0:
        return 0.0
    best = max(abs(float(np.dot(p, a))) for p in peaks)
    u = 1.0 if prev_dir is None else float(np.dot(a, unit(prev_dir)))
    return best * u


# -- reward -------------------------------------------------------------------

def test_reward_listed_examples():
    assert reward((1, 0, 0), (1, 0, 0), [(1, 0, 0)]) == pytest.approx(1.0)
    assert reward((1, 0, 0), (0, 1, 0), [(1, 0, 0)]) == pytest.approx(0.0)
    r = reward((np.sqrt(2) / 2, np.sqrt(2) / 2, 0), (1, 0, 0),
               [(1, 0, 0), (0, 1, 0)])
    assert r == pytest.approx(0.5)


def test_reward_oracle_100_random_cases():
    for _ in range(100):
        a = RNG.normal(size=3)
        while np.linalg.norm(a) < 1e-3:
            a = RNG.normal(size=3)
        prev = None if RNG.random() < 0.2 else unit(RNG.normal(size=3))
        n_peaks = int(RNG.integers(0, 4))
        peaks = [unit(RNG.normal(size=3)) for _ in range(n_peaks)]
        assert reward(a, prev, peaks) == pytest.approx(
            reward_oracle(a, prev, peaks), abs=1e-6)


def test_reward_first_step_factor_is_one():
    p = unit([0.2, 0.9, 0.1])
    assert reward(p, None, [p]) == pytest.approx(1.0)


def test_reward_zero_action_rejected():
    with pytest.raises(EnvError):
        reward((0, 0, 0), None, [(1, 0, 0)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_reward_bounded_by_one(seed):
    rng = np.random.default_rng(seed)
    a = unit(rng.normal(size=3))
    prev = unit(rng.normal(size=3))
    peaks = [unit(rng.normal(size=3)) for _ in range(3)]
    assert abs(reward(a, prev, peaks)) <= 1.0 + 1e-12


# -- state layout -------------------------------------------------------------

def center_seed(phantom, name):
    mask = phantom.mask_for(name).values
    vox = np.argwhere(mask > 0)
    return vox[len(vox) // 2].astype(np.float64)


def test_state_dim_and_zero_history(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    s = env.reset(center_seed(tube_phantom, "tube"))
    assert s.shape == (STATE_DIM,)
    np.testing.assert_array_equal(s[315:327], 0.0)  # 12 direction entries


def test_state_mask_features_deep_inside(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    s = env.reset(np.array([12.0, 6.0, 6.0]))  # on the tube axis
    np.testing.assert_allclose(s[327:334], 1.0)


def test_reset_deterministic(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    seed = center_seed(tube_phantom, "tube")
    np.testing.assert_array_equal(env.reset(seed), env.reset(seed))


def test_reset_out_of_mask_rejected(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    with pytest.raises(EnvError, match="mask"):
        env.reset(np.array([0.0, 0.0, 0.0]))


def test_hint_enters_history(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    s = env.reset(center_seed(tube_phantom, "tube"), initial_dir_hint=(2.0, 0, 0))
    np.testing.assert_allclose(s[315:318], [1, 0, 0])  # normalized, newest slot
    np.testing.assert_array_equal(s[318:327], 0.0)


# -- stepping and termination -------------------------------------------------

def test_step_distance_is_step_size(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    seed = center_seed(tube_phantom, "tube")
    env.reset(seed)
    env.step((5.0, 0, 0))  # non-unit action must be normalized
    moved = env.streamline[-1] - seed
    assert np.linalg.norm(moved) == pytest.approx(env_cfg.step_size)
    np.testing.assert_allclose(moved, [env_cfg.step_size, 0, 0], atol=1e-12)


def test_sharp_angle_termination(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    env.reset(center_seed(tube_phantom, "tube"))
    out = env.step((1.0, 0, 0))
    assert not out.done and out.reason == REASON_NONE
    out = env.step((0.0, 1.0, 0))  # 90 degrees > 60
    assert out.done and out.reason == REASON_SHARP_ANGLE


def test_hint_does_not_arm_angle_check(tube_phantom, env_cfg):
    """The seed hint steers the policy but the first step can oppose it."""
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    env.reset(center_seed(tube_phantom, "tube"), initial_dir_hint=(1.0, 0, 0))
    out = env.step((-1.0, 0, 0))
    assert out.reason != REASON_SHARP_ANGLE


def test_left_mask_termination(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    env.reset(center_seed(tube_phantom, "tube"))
    for _ in range(40):
        out = env.step((0.0, 0, 1.0))  # walk out the tube side
        if out.done:
            break
    assert out.done and out.reason == REASON_LEFT_MASK


def test_max_steps_termination(tube_phantom):
    cfg = EnvConfig(step_size=0.05, max_steps=8)
    env = TrackingEnv(tube_phantom, "tube", cfg)
    env.reset(center_seed(tube_phantom, "tube"))
    for i in range(8):
        out = env.step((1.0, 0, 0))
    assert out.done and out.reason == REASON_MAX_STEPS
    assert len(env.streamline) == 9


def test_angle_takes_precedence_over_mask(tube_phantom, env_cfg):
    """An action that both turns > 60 degrees and exits reports sharp_angle."""
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    env.reset(center_seed(tube_phantom, "tube"))
    env.step((1.0, 0, 0))
    for _ in range(30):
        out = env.step((0.0, 0, 1.0))
        break
    assert out.reason == REASON_SHARP_ANGLE


def test_step_after_done_rejected(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    env.reset(center_seed(tube_phantom, "tube"))
    env.step((1.0, 0, 0))
    env.step((0.0, 1.0, 0))
    with pytest.raises(EnvError, match="finished"):
        env.step((0.0, 1.0, 0))


def test_step_reward_matches_oracle(tube_phantom, env_cfg):
    env = TrackingEnv(tube_phantom, "tube", env_cfg)
    seed = center_seed(tube_phantom, "tube")
    env.reset(seed)
    a = unit([0.9, 0.1, 0.0])
    peaks = tube_phantom.peaks_at(seed)
    out = env.step(a)
    assert out.reward == pytest.approx(reward_oracle(a, None, list(peaks)), abs=1e-6)
    # second step: previous direction factor engages
    b = unit([0.95, -0.05, 0.0])
    peaks2 = tube_phantom.peaks_at(env.tracker.pos[0])
    out2 = env.step(b)
    assert out2.reward == pytest.approx(reward_oracle(b, a, list(peaks2)), abs=1e-6)


def test_batch_matches_single(tube_phantom, env_cfg):
    """BatchTracker in lockstep equals N independent single-episode envs."""
    mask = np.argwhere(tube_phantom.mask_for("tube").values > 0)
    seeds = mask[[3, 11, 25]].astype(np.float64)
    actions = [unit(RNG.normal(size=3) + [3, 0, 0]) for _ in range(5)]

    batch = BatchTracker(tube_phantom, "tube", env_cfg)
    batch.reset(seeds)
    batch_rewards = []
    for a in actions:
        if not batch.active.any():
            break
        r, _, _ = batch.step(np.tile(a, (3, 1)))
        batch_rewards.append(r.copy())

    for i in range(3):
        env = TrackingEnv(tube_phantom, "tube", env_cfg)
        env.reset(seeds[i])
        for t, a in enumerate(actions[: len(batch_rewards)]):
            if not env._episode_open:
                break
            out = env.step(a)
            assert out.reward == pytest.approx(float(batch_rewards[t][i]), abs=1e-9)
            if out.done:
                break


def test_env_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(step_size=0.0)
    with pytest.raises(ValueError):
        EnvConfig(max_steps=0)
