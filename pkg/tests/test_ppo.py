import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import central_differences, discounted_mc, gae_nested_sums, max_relative_error
from tubenav.config import Config
from tubenav.env import Terminal, TubeNavEnv
from tubenav.ppo import (Adam, HyperParams, RolloutBatch, RunningNorm, compute_gae, greedy_action,
                         init_params, load_checkpoint, policy_forward, ppo_loss, ppo_update,
                         save_checkpoint)
from tubenav.ppo.algo import clip_grad_norm
from tubenav.ppo.network import forward, log_softmax, orthogonal
from tubenav.ppo.rollout import RolloutWorker, SerialSampler, sample_action


def mini_problem(seed=0, clip_some=False):
    rng = np.random.default_rng(seed)
    params = init_params(rng, 5, (7, 6), 3, pi_gain=1.0)
    x = rng.normal(size=(8, 5))
    actions = rng.integers(0, 3, 8)
    logits, _, _ = forward(params.weights, x)
    logp = log_softmax(logits)[np.arange(8), actions]
    shift = rng.uniform(-0.1, 0.1, 8)
    if clip_some:
        shift[:3] = [0.6, -0.7, 0.8]  # ratios far outside [0.7, 1.3]
    old = logp - shift
    adv = rng.normal(size=8)
    targets = rng.normal(size=8)
    return params, x, actions, old, adv, targets


@pytest.mark.parametrize("clip_some", [False, True])
def test_loss_gradient_matches_finite_differences(clip_some):
    params, x, a, old, adv, tgt = mini_problem(1, clip_some)
    w = params.weights
    _, grads, _ = ppo_loss(w, x, a, old, adv, tgt, 0.3, 0.5, 0.003)
    fd = central_differences(lambda: ppo_loss(w, x, a, old, adv, tgt, 0.3, 0.5, 0.003, False)[0], w)
    assert max_relative_error(grads, fd) <= 1e-4


def test_gae_matches_nested_sums():
    rng = np.random.default_rng(3)
    r, v = rng.normal(size=40), rng.normal(size=40)
    d = (rng.random(40) < 0.15).astype(float)
    for gamma, lam in [(0.99, 0.95), (0.9, 0.0), (1.0, 1.0), (0.5, 0.3)]:
        adv, ret = compute_gae(r, v, d, gamma, lam, last_value=0.7)
        adv_o, ret_o = gae_nested_sums(r, v, d, gamma, lam, last_value=0.7)
        np.testing.assert_allclose(adv, adv_o, atol=1e-10)
        np.testing.assert_allclose(ret, ret_o, atol=1e-10)


def test_gae_limits():
    rng = np.random.default_rng(4)
    r, v = rng.normal(size=30), rng.normal(size=30)
    d = (rng.random(30) < 0.2).astype(float)
    adv1, _ = compute_gae(r, v, d, 0.97, 1.0, 0.3)
    np.testing.assert_allclose(adv1, discounted_mc(r, d, 0.97, 0.3) - v, atol=1e-12)
    adv0, _ = compute_gae(r, v, d, 0.97, 0.0, 0.3)
    nxt = np.append(v[1:], 0.3)
    np.testing.assert_allclose(adv0, r + 0.97 * nxt * (1 - d) - v, atol=1e-12)
    a, ret = compute_gae([1.0], [0.0], [1.0], 1.0, 1.0)
    assert a[0] == 1.0 and ret[0] == 1.0
    a, _ = compute_gae(np.zeros(5), np.zeros(5), np.zeros(5), 0.9, 0.9)
    assert np.all(a == 0)
    with pytest.raises(ValueError):
        compute_gae([1.0], [0.0, 1.0], [0.0], 0.9, 0.9)


@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=20),
       st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=20))
def test_running_norm_matches_pooled_stats(a, b):
    a, b = np.array(a), np.array(b)
    norm = RunningNorm.zeros(3)
    norm.update(a)
    norm.update(b)
    both = np.vstack([a, b])
    np.testing.assert_allclose(norm.mean, both.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(norm.var, both.var(axis=0), atol=1e-7)
    assert norm.count == len(both)
    assert np.all(np.abs(norm.normalize(both)) <= 5.0)


def test_orthogonal_init():
    rng = np.random.default_rng(0)
    w = orthogonal(rng, (37, 256), np.sqrt(2))
    np.testing.assert_allclose(w @ w.T, 2.0 * np.eye(37), atol=1e-10)
    w = orthogonal(rng, (128, 36), 0.01)
    np.testing.assert_allclose(w.T @ w, 1e-4 * np.eye(36), atol=1e-14)
    p = init_params(rng)
    assert p.dims == (37, 256, 128, 36)
    assert np.all(p.weights["b0"] == 0)


def test_adam_first_step_is_lr_times_sign():
    w = {"a": np.array([1.0, -2.0, 3.0])}
    opt = Adam(lr=0.01)
    opt.step(w, {"a": np.array([0.5, -4.0, 0.2])})
    np.testing.assert_allclose(w["a"], [0.99, -1.99, 2.99], atol=1e-7)
    assert opt.t == 1


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 0.5) == 5.0
    assert np.sqrt(sum(np.sum(v * v) for v in g.values())) == pytest.approx(0.5)
    g = {"a": np.array([0.1])}
    clip_grad_norm(g, 0.5)
    assert g["a"][0] == 0.1


def test_sample_action_distribution():
    rng = np.random.default_rng(0)
    logits = np.log(np.array([0.1, 0.6, 0.3]))
    counts = np.bincount([sample_action(logits, rng)[0] for _ in range(20000)], minlength=3)
    np.testing.assert_allclose(counts / 20000, [0.1, 0.6, 0.3], atol=0.015)
    a, lp = sample_action(logits, rng)
    assert lp == pytest.approx(np.log([0.1, 0.6, 0.3])[a])


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams(gamma=0.0)
    with pytest.raises(ValueError):
        HyperParams(clip=0.0)
    with pytest.raises(ValueError):
        HyperParams(train_batch=1000, minibatch=300)
    hp = HyperParams.from_section(Config().ppo)
    assert (hp.clip, hp.entropy_coef, hp.gamma, hp.lr) == (0.3, 0.003, 0.99, 3e-4)


def bandit_batch(rng, params, n=256):
    """Contextual bandit: the rewarded action is 0 when x0 > 0, else 2."""
    x = rng.normal(size=(n, 5))
    logits, values = policy_forward(params, x)
    acts = np.array([sample_action(l, rng)[0] for l in logits])
    logp = log_softmax(logits)[np.arange(n), acts]
    good = np.where(x[:, 0] > 0, 0, 2)
    r = (acts == good).astype(float)
    dones = np.ones(n)
    adv, ret = compute_gae(r, values, dones, 0.99, 0.95)
    return RolloutBatch(x, acts, logp, r, values, dones, adv, ret)


def test_ppo_update_learns_bandit():
    rng = np.random.default_rng(0)
    params = init_params(rng, 5, (32, 32), 3)
    params.obs_norm.update(rng.normal(size=(1000, 5)))
    hp = HyperParams(lr=3e-3, train_batch=256, minibatch=64, epochs_per_iter=4)
    opt = Adam(hp.lr)
    test_x = rng.normal(size=(500, 5))
    good = np.where(test_x[:, 0] > 0, 0, 2)

    def accuracy(p):
        return np.mean(np.argmax(policy_forward(p, test_x)[0], axis=1) == good)

    before = accuracy(params)
    for _ in range(30):
        params, stats = ppo_update(params, bandit_batch(rng, params), hp, opt, rng)
    assert accuracy(params) > max(before, 0.9)
    assert set(stats) >= {"loss", "policy_loss", "value_loss", "entropy", "clip_fraction",
                          "approx_kl", "grad_norm"}


def test_ppo_update_rejects_wrong_batch_size():
    rng = np.random.default_rng(0)
    params = init_params(rng, 5, (8,), 3)
    batch = bandit_batch(rng, params, 100)
    with pytest.raises(ValueError):
        ppo_update(params, batch, HyperParams(train_batch=200, minibatch=100), Adam(), rng)


def test_ppo_update_raises_on_nan():
    rng = np.random.default_rng(0)
    params = init_params(rng, 5, (8,), 3)
    batch = bandit_batch(rng, params, 100)
    batch.advantages[3] = np.nan
    with pytest.raises(FloatingPointError):
        ppo_update(params, batch, HyperParams(train_batch=100, minibatch=50), Adam(), rng)


def test_policy_forward_rejects_nan():
    params = init_params(np.random.default_rng(0), 5, (8,), 3)
    with pytest.raises(ValueError):
        policy_forward(params, np.array([0, np.nan, 0, 0, 0.0]))


# --- checkpoint ---------------------------------------------------------------------

def greedy_trajectory(params, tube, steps=150):
    env = TubeNavEnv()
    obs = env.reset(tube=tube)
    actions = []
    for _ in range(steps):
        a = greedy_action(params, obs)
        actions.append(a)
        out = env.step(a)
        obs = out.observation
        if out.terminal != Terminal.RUNNING:
            break
    return actions, env.state.position.copy()


def test_checkpoint_round_trip(tmp_path, straight):
    rng = np.random.default_rng(5)
    params = init_params(rng)
    params.obs_norm.update(rng.normal(size=(50, 37)))
    params.ret_norm.update(rng.normal(size=(50, 1)))
    opt = Adam()
    opt.step(params.weights, {k: np.ones_like(v) for k, v in params.weights.items()})
    path = save_checkpoint(tmp_path / "p.npz", params, {"iteration": 3}, opt)
    opt2 = Adam()
    loaded, header = load_checkpoint(path, opt2)
    assert header["iteration"] == 3 and header["dims"] == [37, 256, 128, 36]
    for k in params.weights:
        assert np.array_equal(params.weights[k], loaded.weights[k])
        assert np.array_equal(opt.m[k], opt2.m[k])
    assert opt2.t == 1
    assert np.array_equal(params.obs_norm.var, loaded.obs_norm.var)
    a1, p1 = greedy_trajectory(params, straight)
    a2, p2 = greedy_trajectory(loaded, straight)
    assert a1 == a2 and np.array_equal(p1, p2)
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_foreign_files(tmp_path):
    params = init_params(np.random.default_rng(0))
    path = save_checkpoint(tmp_path / "p.npz", params)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    header = json.loads(str(arrays["header"]))
    header["obs_layout_hash"] = "0" * 64
    arrays["header"] = np.array(json.dumps(header))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="layout"):
        load_checkpoint(tmp_path / "bad.npz")
    np.savez(tmp_path / "other.npz", header=np.array(json.dumps({"format": "x"})))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "other.npz")


# --- rollouts -----------------------------------------------------------------------

def test_worker_collects_consistent_fragments():
    params = init_params(np.random.default_rng(0))
    w = RolloutWorker(Config(), 0, 7)
    res = w.collect(params, 300, 0, 100, 0.99, 0.95)
    b = res.batch
    assert len(b) == 300 and b.obs.shape == (300, 37)
    np.testing.assert_allclose(b.returns, b.advantages + b.values)
    for ep in res.episodes:
        assert ep.level == 0 and ep.terminal != Terminal.RUNNING
    assert int(b.dones.sum()) == len(res.episodes)
    # the same worker seed reproduces the same rollout
    again = RolloutWorker(Config(), 0, 7).collect(params, 300, 0, 100, 0.99, 0.95)
    assert np.array_equal(again.batch.actions, b.actions)
    other = RolloutWorker(Config(), 1, 7).collect(params, 300, 0, 100, 0.99, 0.95)
    assert not np.array_equal(other.batch.actions, b.actions)


def test_serial_sampler_shapes():
    params = init_params(np.random.default_rng(0))
    sampler = SerialSampler(Config(), 2, 0)
    results = sampler.collect(params, 50, 0, 25, 0.99, 0.95)
    assert [len(r.batch) for r in results] == [50, 50]
    assert len(sampler.rng_states()) == 2
