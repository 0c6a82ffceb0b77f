from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wmar import diffcore as dc
from wmar.agent import (
    Agent,
    AgentConfig,
    MissingRewardScale,
    Trajectory,
    actor_critic_update,
    dream_rollout,
    lambda_returns,
    scale_reward,
)
from wmar.worldmodel import WorldModel, WorldModelConfig


def _agent(feat_dim=4, actions=2, **kw) -> Agent:
    return Agent(AgentConfig(feat_dim=feat_dim, action_count=actions, hidden=16, dtype="float64", **kw), np.random.default_rng(0))


def _single_step(feat: np.ndarray, actions: np.ndarray, rewards: np.ndarray) -> Trajectory:
    """H=1 trajectory from one repeated state; the episode ends after the step."""
    N = len(actions)
    feats = np.stack([np.tile(feat, (N, 1)), np.tile(feat, (N, 1))])
    return Trajectory(feats, actions[None], np.zeros((1, N)), rewards[None].astype(float), np.zeros((1, N)))


# -- reward scales ---------------------------------------------------------------


def test_scale_reward_examples():
    assert scale_reward(100, "Crazy Climber", {"Crazy Climber": 0.001}) == pytest.approx(0.1)
    assert scale_reward(20, "Ms Pacman", {"Ms Pacman": 0.05}) == pytest.approx(1.0)
    assert scale_reward(3.5, "grid", {"grid": 1.0}) == 3.5


def test_scale_reward_missing_label():
    with pytest.raises(MissingRewardScale):
        scale_reward(1.0, "chain", {"grid": 1.0})


# -- λ-returns -------------------------------------------------------------------


def test_lambda_returns_monte_carlo_case():
    R = lambda_returns([1.0, 1.0], [5.0, 5.0], [1.0, 1.0], 0.0, gamma=0.9, lam=1.0)
    np.testing.assert_allclose(R, [1.9, 1.0])


def test_lambda_returns_td_case():
    r, v, c = np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0, 4.0]), np.array([1.0, 0.0, 1.0])
    R = lambda_returns(r, v, c, 10.0, gamma=0.9, lam=0.0)
    np.testing.assert_allclose(R, r + 0.9 * c * v)


def test_lambda_returns_length_mismatch():
    with pytest.raises(ValueError):
        lambda_returns([1.0, 2.0], [1.0], [1.0, 1.0], 0.0, 0.9, 0.9)


def _brute_force(r, v, c, boot, gamma, lam):
    """Explicit mixture of n-step returns.

    The longest return ends in the last dreamed state, whose value is itself
    the mixture (1 - lam) * V + lam * bootstrap.
    """
    H = len(r)
    out = []
    for k in range(H):
        def n_step(n):
            total, disc = 0.0, 1.0
            for i in range(n):
                total += disc * r[k + i]
                disc *= gamma * c[k + i]
            tail = v[k + n - 1] if k + n < H else (1 - lam) * v[H - 1] + lam * boot
            return total + disc * tail

        m = H - k
        R = sum((1 - lam) * lam ** (n - 1) * n_step(n) for n in range(1, m)) + lam ** (m - 1) * n_step(m)
        out.append(R)
    return np.array(out)


@given(
    st.integers(1, 12).flatmap(
        lambda H: st.tuples(
            hnp.arrays(np.float64, H, elements=st.floats(-5, 5)),
            hnp.arrays(np.float64, H, elements=st.floats(-5, 5)),
            hnp.arrays(np.float64, H, elements=st.floats(0, 1)),
        )
    ),
    st.floats(-5, 5),
    st.floats(0.01, 0.99),
    st.floats(0, 1),
)
@settings(max_examples=200, deadline=None)
def test_lambda_returns_match_brute_force(rvc, boot, gamma, lam):
    r, v, c = rvc
    got = lambda_returns(r, v, c, boot, gamma, lam)
    np.testing.assert_allclose(got, _brute_force(r, v, c, boot, gamma, lam), atol=1e-9, rtol=1e-9)


# -- config ------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"gamma": 1.0}, {"gamma": 0.0}, {"lam": 1.5}, {"entropy": -1.0}, {"horizon": 0}])
def test_agent_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        AgentConfig(feat_dim=4, action_count=2, **kw)


# -- policy ------------------------------------------------------------------------


@given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_policy_probabilities_and_entropy_range(feat):
    agent = _agent(actions=3)
    p = dc._np_softmax(agent.policy_logits(feat))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    ent = dc.categorical_entropy(dc.as_tensor(agent.policy_logits(feat))).data
    assert np.all(ent >= -1e-12) and np.all(ent <= math.log(3) + 1e-12)


# -- dreaming --------------------------------------------------------------------------


def _wm_and_agent(actions=3):
    wm = WorldModel(WorldModelConfig(obs_dim=3, action_count=actions, deter=6, embed=6, hidden=8, units=2, classes=2, dtype="float64"), np.random.default_rng(0))
    agent = Agent(AgentConfig(feat_dim=wm.cfg.feat, action_count=actions, hidden=8, dtype="float64"), np.random.default_rng(1))
    return wm, agent


def test_dream_rollout_shapes_for_one_step():
    wm, agent = _wm_and_agent()
    start = wm.initial_state(5, np.random.default_rng(0))
    traj = dream_rollout(wm, agent, start, 1, np.random.default_rng(0))
    assert traj.feats.shape == (2, 5, wm.cfg.feat)
    assert traj.actions.shape == traj.rewards.shape == traj.continues.shape == (1, 5)
    assert np.all((traj.continues >= 0) & (traj.continues <= 1))


def test_degenerate_actor_always_picks_its_action():
    wm, agent = _wm_and_agent()
    last = [k for k in agent.actor.params][-1]
    agent.actor.params[last].data[:] = [0.0, 1e9, 0.0]
    start = wm.initial_state(7, np.random.default_rng(0))
    traj = dream_rollout(wm, agent, start, 4, np.random.default_rng(0))
    assert np.all(traj.actions == 1)


def test_dream_rollout_is_reproducible():
    wm, agent = _wm_and_agent()
    start = wm.initial_state(4, np.random.default_rng(0))
    a = dream_rollout(wm, agent, start, 6, np.random.default_rng(11))
    b = dream_rollout(wm, agent, start, 6, np.random.default_rng(11))
    for f in ("feats", "actions", "logp", "rewards", "continues"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_update_leaves_world_model_untouched():
    wm, agent = _wm_and_agent()
    before = {k: p.data.copy() for k, p in wm.params.items()}
    traj = dream_rollout(wm, agent, wm.initial_state(4, np.random.default_rng(0)), 5, np.random.default_rng(0))
    actor_critic_update(agent, traj)
    assert all(np.array_equal(before[k], p.data) for k, p in wm.params.items())
    assert all(p.grad is None for p in wm.params.values())


# -- actor-critic update -----------------------------------------------------------------


def test_zero_advantage_update_raises_entropy():
    agent = _agent(entropy=1.0)
    last = [k for k in agent.actor.params][-1]
    agent.actor.params[last].data[:] = [2.0, -2.0]  # skewed policy
    feat = np.ones(4)
    ent = lambda: float(dc.categorical_entropy(dc.as_tensor(agent.policy_logits(feat[None]))).data[0])  # noqa: E731
    before = ent()
    # zero rewards and a zero critic give R = V = 0, so only the entropy term acts
    info = agent.update(_single_step(feat, np.array([0, 1, 0, 1]), np.zeros(4)))
    assert info["adv_abs"] == 0.0
    assert ent() > before


def test_positive_advantage_raises_probability_of_the_action():
    agent = _agent(entropy=0.0)
    feat = np.array([0.5, -0.2, 0.1, 1.0])
    p0 = dc._np_softmax(agent.policy_logits(feat[None]))[0, 0]
    agent.update(_single_step(feat, np.array([0]), np.array([1.0])))
    assert dc._np_softmax(agent.policy_logits(feat[None]))[0, 0] > p0


def test_critic_converges_to_a_constant_target():
    agent = _agent(critic_lr=3e-3)
    feat = np.array([0.3, 0.1, -0.4, 0.2])
    for _ in range(500):
        agent.update(_single_step(feat, np.zeros(8, dtype=int), np.full(8, 0.7)))
    assert abs(agent.value(feat[None])[0] - 0.7) < 1e-2


def test_reinforce_estimator_matches_the_exact_policy_gradient():
    rng = np.random.default_rng(0)
    logits = dc.parameter(np.array([0.4, -0.3, 0.1]))
    A = np.array([1.0, -0.5, 2.0])
    n = 20_000
    actions = dc.sample_categorical(np.tile(dc._np_softmax(logits.data), (n, 1)), rng)
    rows = dc.add(dc.Tensor(np.zeros((n, 3))), logits)
    est = dc.mul(dc.pick(dc.log_softmax(rows), actions), A[actions]).mean()
    est.backward()
    # per-sample gradients for the standard error: (onehot - pi) * A
    p = dc._np_softmax(logits.data)
    per = (np.eye(3)[actions] - p) * A[actions, None]
    se = per.std(axis=0) / math.sqrt(n)
    exact = p * (A - (p * A).sum())
    np.testing.assert_allclose(logits.grad, per.mean(axis=0), atol=1e-12)
    assert np.all(np.abs(logits.grad - exact) < 3 * se)


def test_reward_scale_and_entropy_trade_off_leave_the_greedy_action_unchanged():
    payout = np.array([0.2, 1.0])
    feat = np.array([1.0, 0.0, 0.0, 1.0])

    def train(scale, eta):
        agent = _agent(entropy=eta, actor_lr=3e-3, critic_lr=3e-3)
        rng = np.random.default_rng(0)
        for _ in range(300):
            a = agent.act(np.tile(feat, (16, 1)), rng)
            agent.update(_single_step(feat, a, scale * payout[a]))
        return int(np.argmax(agent.policy_logits(feat[None])[0]))

    assert train(1.0, 0.01) == train(10.0, 0.001) == 1


def test_agent_state_round_trip():
    agent = _agent()
    feat = np.array([0.5, -0.2, 0.1, 1.0])
    agent.update(_single_step(feat, np.array([0, 1]), np.array([1.0, 0.0])))
    clone = _agent()
    clone.load_state_dict(agent.state_dict())
    traj = _single_step(feat, np.array([1, 1]), np.array([0.3, 0.3]))
    agent.update(traj)
    clone.update(traj)
    for k in agent.actor.params:
        assert agent.actor.params[k].data.tobytes() == clone.actor.params[k].data.tobytes()
    for k in agent.critic.params:
        assert agent.slow_critic[k].tobytes() == clone.slow_critic[k].tobytes()
