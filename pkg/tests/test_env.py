import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tubenav.config import Config
from tubenav.dynamics import DroneState
from tubenav.env import (BLIND, MEMORY, OBS_BLOCKS, OBS_DIM, OBS_LAYOUT, SHAPED_REWARD_BOUNDS,
                         VISIBLE, CurriculumManager, EpisodeFinished, Terminal, TubeNavEnv,
                         layout_hash, safety_metric, shaped_reward, turn_weights, warmup_bonus)
from tubenav.sensing import LidarFeatures

LAYOUT_SHA256 = "cf98af48c4d44906e41cfbe671a058d5fcb0a29d65ef3703831ed9b1fbaa9698"


def feats(s_f=1.0, s_r=1.0, m_f=0.5, m_r=0.5, h_f=0.0, v_f=0.0, c_turn=0.0, l_min=0.2):
    return LidarFeatures(h_f, v_f, 0.0, 0.0, s_f, s_r, m_f, m_r, l_min, c_turn,
                         *([0.0] * 8))


def with_env(**kw):
    cfg = Config()
    return dataclasses.replace(cfg, env=dataclasses.replace(cfg.env, **kw))


def test_layout_is_frozen():
    assert OBS_DIM == 37 and len(set(OBS_LAYOUT)) == 37
    assert layout_hash() == LAYOUT_SHA256
    assert sum(b - a for a, b in OBS_BLOCKS.values()) == 37
    assert [OBS_BLOCKS[k][1] - OBS_BLOCKS[k][0] for k in
            ("lidar", "kinematics", "camera", "memory", "context")] == [9, 15, 5, 5, 3]


# --- reward ---------------------------------------------------------------------

def test_reward_case_examples():
    assert shaped_reward(VISIBLE, 1.0, feats(), 20, 20) == pytest.approx(2.5, abs=1e-12)
    assert shaped_reward(BLIND, 0.0, feats(), 20, 20) == pytest.approx(1.2, abs=1e-12)
    # memory case: S_align + 1 + 0.4 + 0.3
    assert shaped_reward(MEMORY, 1.0, feats(), 20, 20) == pytest.approx(2.7, abs=1e-12)


def test_turn_weights():
    assert turn_weights(0.0) == (0.6, 0.4)
    w_f, w_r = turn_weights(1.0)
    assert w_f == pytest.approx(0.36) and w_r == pytest.approx(0.56)


def test_warmup_bonus_vanishes_at_boundary():
    f = feats(s_f=0.9, s_r=0.7, c_turn=0.3)
    bonus = warmup_bonus(0.9, 0.7, 0.3)
    assert bonus == pytest.approx(0.5 * (0.63 + 0.21) * 0.8 * 0.85)
    r19 = shaped_reward(BLIND, 0.0, f, 19, 20)
    r20 = shaped_reward(BLIND, 0.0, f, 20, 20)
    assert r19 - r20 == pytest.approx(bonus, abs=1e-15)
    assert shaped_reward(BLIND, 0.0, f, 500, 20) == r20


@given(st.sampled_from([VISIBLE, MEMORY, BLIND]), st.floats(-1, 1), st.floats(0, 1),
       st.floats(0, 1), st.floats(0, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 1),
       st.integers(0, 40))
def test_shaped_reward_bounds(regime, s_align, s_f, s_r, m_f, h_f, v_f, c, t):
    r = shaped_reward(regime, s_align, feats(s_f, s_r, m_f, 0.5, h_f, v_f, c), t, 20)
    lo, hi = SHAPED_REWARD_BOUNDS
    assert lo <= r <= hi


def test_safety_metric():
    assert safety_metric(0.0, 5.0, 0.5) == -1.0
    assert safety_metric(0.05, 5.0, 0.5) == pytest.approx(0.0)
    assert safety_metric(0.5, 5.0, 0.5) == 1.0


# --- episode --------------------------------------------------------------------

def test_reset_observation(straight):
    env = TubeNavEnv()
    obs = env.reset(tube=straight)
    idx = {n: i for i, n in enumerate(OBS_LAYOUT)}
    assert obs.shape == (37,)
    assert obs[idx["inside"]] == 1.0
    assert obs[idx["episode_progress"]] == -1.0
    assert obs[idx["global_progress"]] == pytest.approx(-1.0)
    assert obs[idx["speed"]] == pytest.approx(2 * 0.25 - 1)
    assert obs[idx["target_visible"]] == 1.0
    assert obs[idx["memory_valid"]] == 1.0
    np.testing.assert_allclose(obs[[idx["offset_right"], idx["offset_up"], idx["offset_forward"]]], 0.0,
                               atol=1e-12)
    assert env.state.speed == 0.375 and not env.done


def test_step_requires_reset_and_stops_after_end(straight):
    env = TubeNavEnv()
    with pytest.raises(EpisodeFinished):
        env.step(0)
    env.reset(tube=straight)
    outside = DroneState.aligned(np.array([2.0, 0, 5]), [0, 0, 1.0])
    out = env.apply_state(outside)
    assert out.terminal == Terminal.FAILURE
    with pytest.raises(EpisodeFinished):
        env.step(0)


def test_terminal_rewards(straight):
    env = TubeNavEnv()
    env.reset(tube=straight)
    out = env.apply_state(DroneState.aligned(np.array([0, 0, 29.6]), [0, 0, 1.0], 0.375))
    assert out.terminal == Terminal.SUCCESS
    assert out.reward - out.info["shaped_reward"] == 10.0

    env.reset(tube=straight)
    out = env.apply_state(DroneState.aligned(np.array([1.2, 0, 5]), [0, 0, 1.0], 0.375))
    assert out.terminal == Terminal.FAILURE
    assert out.reward - out.info["shaped_reward"] == -10.0

    env = TubeNavEnv(with_env(t_max=3))
    env.reset(tube=straight)
    outs = [env.step(0) for _ in range(3)]
    assert [o.terminal for o in outs] == [Terminal.RUNNING, Terminal.RUNNING, Terminal.TIMEOUT]
    assert outs[-1].reward - outs[-1].info["shaped_reward"] == -1.0
    assert outs[0].reward == outs[0].info["shaped_reward"]


def test_straight_flight_succeeds(straight):
    env = TubeNavEnv()
    env.reset(tube=straight)
    top = env.action_space.encode(0, 3)
    n = 0
    while not env.done:
        out = env.step(top)
        n += 1
    assert out.terminal == Terminal.SUCCESS
    # accelerate 0.375 -> 1.5 m/s at 0.2 m/s per step, then cruise 29.5 m
    assert 195 <= n <= 205
    assert out.info["regime"] == VISIBLE


def test_step_info_and_episode_progress(straight):
    env = TubeNavEnv(with_env(t_max=10))
    env.reset(tube=straight)
    out = env.step(0)
    assert out.info["t"] == 0
    assert out.observation[OBS_LAYOUT.index("episode_progress")] == -1.0
    out = env.step(0)
    assert out.observation[OBS_LAYOUT.index("episode_progress")] == pytest.approx(-0.8)
    assert set(out.info) >= {"t", "position", "s", "d_perp_over_r", "s_align", "regime",
                             "shaped_reward", "c_turn", "inside"}


def test_random_steps_stay_in_range():
    env = TubeNavEnv()
    rng = np.random.default_rng(0)
    for ep in range(5):
        obs = env.reset(level=ep % 3, rng=ep)
        assert np.all(np.abs(obs) <= 1.0)
        while not env.done:
            out = env.step(int(rng.integers(36)))
            assert np.all(np.abs(out.observation) <= 1.0)
            assert np.isfinite(out.reward)


def test_reset_is_reproducible():
    a, b = TubeNavEnv(), TubeNavEnv()
    np.testing.assert_array_equal(a.reset(2, 5), b.reset(2, 5))
    for action in (3, 17, 35, 8):
        np.testing.assert_array_equal(a.step(action).observation, b.step(action).observation)


# --- curriculum -------------------------------------------------------------------

def test_curriculum_advances_at_threshold():
    mgr = CurriculumManager()
    for i in range(100):
        adv = mgr.record(Terminal.SUCCESS if i < 85 else Terminal.FAILURE)
    assert adv and mgr.level == 1 and len(mgr.window) == 0 and mgr.history == [1]
    assert mgr.advance_rates == [pytest.approx(0.85)]


def test_curriculum_holds_below_threshold_and_caps():
    mgr = CurriculumManager()
    for i in range(100):
        mgr.record(Terminal.SUCCESS if i < 84 else Terminal.TIMEOUT)
    assert mgr.level == 0 and mgr.success_rate == pytest.approx(0.84)
    # sliding window: one more success drops the oldest (a success) -> still 0.84
    mgr.record(Terminal.SUCCESS)
    assert mgr.level == 0
    top = CurriculumManager(level=2)
    for _ in range(200):
        assert not top.record(Terminal.SUCCESS)
    assert top.level == 2


def test_curriculum_needs_full_window():
    mgr = CurriculumManager()
    for _ in range(99):
        mgr.record(Terminal.SUCCESS)
    assert mgr.level == 0
    assert mgr.record(Terminal.SUCCESS)
