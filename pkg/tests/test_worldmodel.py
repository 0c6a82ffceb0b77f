from __future__ import annotations

import numpy as np
import pytest

from wmar import diffcore as dc
from wmar.replay import AugmentedBuffer, Batch, Step, sample_minibatch
from wmar.worldmodel import NonFiniteLoss, WorldModel, WorldModelConfig, train_wm


def _small(**kw) -> WorldModelConfig:
    base = dict(obs_dim=3, action_count=2, deter=8, embed=8, hidden=16, units=2, classes=3, dtype="float64")
    base.update(kw)
    return WorldModelConfig(**base)


def _buffer(step_fn, n_steps=600, chunk=16, seed=0) -> AugmentedBuffer:
    buf = AugmentedBuffer(4096, 16, chunk, np.random.default_rng(seed))
    for t in range(n_steps):
        buf.add_step(step_fn(t))
    return buf


def _batch(rng, B=3, T=5, obs_dim=3, actions=2) -> Batch:
    first = np.zeros((B, T), bool)
    first[:, 0] = True
    return Batch(
        obs=rng.normal(size=(B, T, obs_dim)),
        action=rng.integers(0, actions, size=(B, T)),
        reward=rng.normal(size=(B, T)),
        is_first=first,
        is_terminal=np.zeros((B, T), bool),
    )


def test_reset_ignores_the_incoming_state():
    wm = WorldModel(_small(), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    init = wm.initial_state(2, np.random.default_rng(5))
    other = wm.dream_step(init, np.array([1, 1]), rng)
    obs = rng.normal(size=(2, 3))
    a, _, _ = wm.observe_step(init, np.array([0, 1]), obs, np.array([True, True]), np.random.default_rng(9), init=init)
    b, _, _ = wm.observe_step(other, np.array([1, 0]), obs, np.array([True, True]), np.random.default_rng(9), init=init)
    np.testing.assert_array_equal(a.h.data, b.h.data)
    np.testing.assert_array_equal(a.z.data, b.z.data)


def test_zero_gru_halves_the_initial_state():
    wm = WorldModel(_small(), np.random.default_rng(0))
    for p in wm.gru.values():
        p.data[:] = 0.0
    wm.h0.data[:] = np.linspace(-1, 1, 8)
    init = wm.initial_state(1, np.random.default_rng(0))
    s, _, _ = wm.observe_step(init, np.array([0]), np.zeros((1, 3)), np.array([True]), np.random.default_rng(0), init=init)
    np.testing.assert_allclose(s.h.data, 0.5 * wm.h0.data[None])


def test_state_widths_and_dream_determinism():
    cfg = _small()
    wm = WorldModel(cfg, np.random.default_rng(0))

    def dream(seed):
        rng = np.random.default_rng(seed)
        s = wm.initial_state(4, rng)
        out = []
        for t in range(6):
            s = wm.dream_step(s, np.full(4, t % 2), rng)
            assert s.h.shape == (4, cfg.deter) and s.z.shape == (4, cfg.stoch)
            out.append(s.features().data.copy())
        return np.stack(out)

    assert dream(3).tobytes() == dream(3).tobytes()


def test_identical_seeds_give_identical_trajectories():
    def run():
        wm = WorldModel(_small(dtype="float32"), np.random.default_rng(4))
        rng = np.random.default_rng(4)
        s = wm.initial_state(2, rng)
        traj = []
        for t in range(10):
            s, post, prior = wm.observe_step(s, np.array([t % 2, 1]), np.full((2, 3), t / 10), np.array([t == 0] * 2), rng)
            traj.append(np.concatenate([s.h.data, s.z.data, post.data, prior.data], axis=1))
        return np.stack(traj)

    assert run().tobytes() == run().tobytes()


def test_non_finite_observation_is_rejected():
    wm = WorldModel(_small(), np.random.default_rng(0))
    s = wm.initial_state(1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        wm.observe_step(s, np.array([0]), np.array([[np.nan, 0, 0]]), np.array([False]), np.random.default_rng(0))


def test_kl_terms_never_drop_below_free_bits():
    wm = WorldModel(_small(free_bits=1.0), np.random.default_rng(0))
    rng = np.random.default_rng(2)
    for _ in range(5):
        _, diag, _ = wm.loss(_batch(rng), rng)
        assert diag["kl_dyn"] >= 1.0 and diag["kl_rep"] >= 1.0


def test_identical_posterior_and_prior_clamp_to_free_bits():
    wm = WorldModel(_small(free_bits=0.7, embed=8), np.random.default_rng(0))
    # make the posterior ignore the embedding and copy the prior's weights
    post, prior = wm.posterior.params, wm.prior.params
    for k in post:
        if post[k].shape == prior[k].shape:
            post[k].data = prior[k].data.copy()
    first_w = [k for k in post if post[k].shape != prior[k].shape]
    for k in first_w:
        post[k].data[:] = 0.0
        post[k].data[: prior[k].shape[0]] = prior[k].data
    _, diag, _ = wm.loss(_batch(np.random.default_rng(1)), np.random.default_rng(1))
    assert diag["kl_dyn"] == pytest.approx(0.7) and diag["kl_rep"] == pytest.approx(0.7)


def test_states_after_a_reset_do_not_depend_on_earlier_steps():
    wm = WorldModel(_small(), np.random.default_rng(0))
    rng = np.random.default_rng(3)
    b = _batch(rng, B=2, T=6)
    b.is_first[:, 3] = True
    perturbed = Batch(b.obs.copy(), b.action.copy(), b.reward, b.is_first, b.is_terminal)
    perturbed.obs[:, :3] += rng.normal(size=(2, 3, 3))
    perturbed.action[:, :3] = 1 - perturbed.action[:, :3]
    _, _, s1 = wm.loss(b, np.random.default_rng(7))
    _, _, s2 = wm.loss(perturbed, np.random.default_rng(7))
    # rows are time-major: [T*B]; compare every row from t=3 on
    np.testing.assert_array_equal(s1["h"][3 * 2 :], s2["h"][3 * 2 :])
    assert not np.array_equal(s1["h"][: 3 * 2], s2["h"][: 3 * 2])


def test_non_finite_loss_reports_diagnostics():
    wm = WorldModel(_small(), np.random.default_rng(0))
    b = _batch(np.random.default_rng(0))
    b.reward[0, 0] = 1e300
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises((NonFiniteLoss, dc.NonFiniteError)):
        wm.loss(b, np.random.default_rng(0))


def test_full_loss_gradient_check():
    from wmar.gradsuite import check_world_model_loss

    for seed in range(3):
        assert check_world_model_loss(seed).max_rel_err < 1e-3


def test_zero_iterations_leave_params_unchanged():
    wm = WorldModel(_small(), np.random.default_rng(0))
    before = {k: p.data.copy() for k, p in wm.params.items()}
    buf = _buffer(lambda t: Step(np.zeros(3), 0, 0.0, t == 0), 64)
    assert train_wm(wm, buf, 0, 2, 4, np.random.default_rng(0)) == []
    assert all(np.array_equal(before[k], p.data) for k, p in wm.params.items())


def test_training_is_deterministic_given_seeds():
    buf = _buffer(lambda t: Step(np.array([np.sin(t), 0.0, 1.0]), t % 2, float(t % 3 == 0), t % 20 == 0), 300)

    def run():
        wm = WorldModel(_small(dtype="float32"), np.random.default_rng(1))
        train_wm(wm, buf, 5, 4, 8, np.random.default_rng(2))
        return {k: p.data.copy() for k, p in wm.params.items()}

    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_reconstruction_loss_falls_on_a_constant_observation():
    obs = np.array([0.5, -1.0, 2.0])
    buf = _buffer(lambda t: Step(obs, 0, 0.0, t % 50 == 0), 400)
    wm = WorldModel(_small(lr=3e-3), np.random.default_rng(0))
    hist = train_wm(wm, buf, 300, 4, 8, np.random.default_rng(0))
    recon = np.array([h["recon"] for h in hist])
    smooth = recon.reshape(6, 50).mean(axis=1)
    assert np.all(np.diff(smooth) < 0), smooth
    assert smooth[-1] < 0.02 * recon[0]


def test_dream_agrees_with_observation_on_a_one_state_env():
    obs = np.array([1.0, 0.0, -1.0])
    buf = _buffer(lambda t: Step(obs, 0, 1.0, t % 32 == 0), 400)
    wm = WorldModel(_small(lr=3e-3, free_bits=0.0), np.random.default_rng(0))
    train_wm(wm, buf, 600, 4, 8, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    s = wm.initial_state(8, rng)
    s, _, _ = wm.observe_step(s, np.zeros(8), np.tile(obs, (8, 1)), np.ones(8, bool), rng)
    for _ in range(5):
        s = wm.dream_step(s, np.zeros(8), rng)
        pred = wm.decoder(s.features()).data
        np.testing.assert_allclose(pred, np.tile(obs, (8, 1)), atol=0.1)
        r_hat, _ = wm.heads(s.features())
        np.testing.assert_allclose(r_hat.data, 1.0, atol=0.1)


def test_reward_head_fits_a_two_state_env():
    # alternate between two observations; reward 1 on arriving in state B
    A, Bo = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])

    def step(t):
        in_b = t % 2 == 1
        return Step(Bo if in_b else A, t % 2, 1.0 if in_b else 0.0, t % 40 == 0)

    buf = _buffer(step, 800)
    wm = WorldModel(_small(lr=3e-3), np.random.default_rng(0))
    train_wm(wm, buf, 400, 8, 8, np.random.default_rng(0))
    batch = sample_minibatch(buf, 8, 8, np.random.default_rng(5))
    _, _, starts = wm.loss(batch, np.random.default_rng(5))
    feat = dc.Tensor(np.concatenate([starts["h"], starts["z"]], axis=1))
    r_hat, _ = wm.heads(feat)
    # rows are time-major; the first row of every window is a forced reset
    # in the middle of an episode, so only later rows are judged
    np.testing.assert_allclose(r_hat.data[8:], batch.reward.T.reshape(-1)[8:], atol=0.1)


def test_state_dict_round_trip():
    wm = WorldModel(_small(), np.random.default_rng(0))
    buf = _buffer(lambda t: Step(np.ones(3) * t % 5, t % 2, 0.0, t % 20 == 0), 200)
    train_wm(wm, buf, 3, 2, 4, np.random.default_rng(0))
    clone = WorldModel(_small(), np.random.default_rng(99))
    clone.load_state_dict(wm.state_dict())
    for r in (wm, clone):
        train_wm(r, buf, 2, 2, 4, np.random.default_rng(3))
    assert all(wm.params[k].data.tobytes() == clone.params[k].data.tobytes() for k in wm.params)
