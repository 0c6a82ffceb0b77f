"""Actor-critic trained on dreamed trajectories.

The actor is updated with REINFORCE plus a fixed entropy bonus; the critic
regresses onto λ-returns computed with a slowly averaged copy of itself.
Nothing here touches a real environment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import MLP, Tensor
from .worldmodel import ModelState, WorldModel


@dataclass
class AgentConfig:
    feat_dim: int
    action_count: int
    hidden: int = 128
    layers: int = 2
    gamma: float = 0.95
    lam: float = 0.95
    entropy: float = 3e-3
    horizon: int = 16
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    clip: float = 100.0
    slow_critic_decay: float = 0.98
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.entropy < 0:
            raise ValueError("entropy coefficient must be non-negative")


class MissingRewardScale(KeyError):
    pass


def scale_reward(reward: float, task: str, table: dict[str, float]) -> float:
    if task not in table:
        raise MissingRewardScale(f"no reward scale for task {task!r}")
    return reward * table[task]


def lambda_returns(
    rewards: np.ndarray,
    values: np.ndarray,
    continues: np.ndarray,
    bootstrap: np.ndarray | float,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """Backward recursion for λ-return targets.

    Index ``k`` describes the transition out of state ``k``: ``rewards[k]``,
    ``continues[k]`` and ``values[k]`` belong to the state it lands in.
    ``R[k] = r[k] + γ c[k] ((1 - λ) v[k] + λ R[k+1])`` with ``R[H] = bootstrap``.
    """
    rewards, values, continues = (np.asarray(x, dtype=np.float64) for x in (rewards, values, continues))
    if not (rewards.shape == values.shape == continues.shape):
        raise ValueError("rewards, values and continues must share a shape")
    H = rewards.shape[0]
    out = np.empty_like(rewards)
    nxt = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), rewards.shape[1:])
    for k in range(H - 1, -1, -1):
        nxt = rewards[k] + gamma * continues[k] * ((1.0 - lam) * values[k] + lam * nxt)
        out[k] = nxt
    return out


@dataclass
class Trajectory:
    """Dreamed rollout; ``feats`` has H+1 rows of states, the rest H rows."""

    feats: np.ndarray  # [H+1, N, F]
    actions: np.ndarray  # [H, N]
    logp: np.ndarray  # [H, N]
    rewards: np.ndarray  # [H, N]
    continues: np.ndarray  # [H, N]


class Agent:
    def __init__(self, cfg: AgentConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        self.actor = MLP(rng, cfg.feat_dim, cfg.hidden, cfg.action_count, cfg.layers, dt)
        self.critic = MLP(rng, cfg.feat_dim, cfg.hidden, 1, cfg.layers, dt, out_scale=0.0)
        self.slow_critic = {k: p.data.copy() for k, p in self.critic.params.items()}
        self.actor_opt = dc.Adam(self.actor.params, lr=cfg.actor_lr, clip=cfg.clip)
        self.critic_opt = dc.Adam(self.critic.params, lr=cfg.critic_lr, clip=cfg.clip)
        self.updates = 0

    # ------------------------------------------------------------------

    def policy_logits(self, feat: np.ndarray) -> np.ndarray:
        return self.actor.forward_np(feat)

    def act(self, feat: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        logits = self.policy_logits(feat)
        return dc.sample_categorical(dc._np_softmax(logits), rng)

    def value(self, feat: np.ndarray, slow: bool = False) -> np.ndarray:
        if not slow:
            return self.critic.forward_np(feat)[..., 0]
        saved = {k: p.data for k, p in self.critic.params.items()}
        try:
            for k, p in self.critic.params.items():
                p.data = self.slow_critic[k]
            return self.critic.forward_np(feat)[..., 0]
        finally:
            for k, p in self.critic.params.items():
                p.data = saved[k]

    # ------------------------------------------------------------------

    def dream_rollout(self, wm: WorldModel, start: ModelState, horizon: int, rng: np.random.Generator) -> Trajectory:
        """Imagine ``horizon`` steps from each start state using the prior."""
        feats, actions, logps, rewards, conts = [], [], [], [], []
        with dc.no_grad():
            state = ModelState(dc.Tensor(start.h.data), dc.Tensor(start.z.data))
            feat = np.concatenate([state.h.data, state.z.data], axis=-1)
            feats.append(feat)
            for _ in range(horizon):
                logits = self.policy_logits(feat)
                lp = dc._np_log_softmax(logits)
                a = dc.sample_categorical(np.exp(lp), rng)
                state = wm.dream_step(state, a, rng)
                feat = np.concatenate([state.h.data, state.z.data], axis=-1)
                r, c_logit = wm.heads(dc.Tensor(feat))
                feats.append(feat)
                actions.append(a)
                logps.append(lp[np.arange(len(a)), a])
                rewards.append(r.data)
                conts.append(dc._sigmoid(c_logit.data))
        return Trajectory(np.stack(feats), np.stack(actions), np.stack(logps), np.stack(rewards), np.stack(conts))

    def update(self, traj: Trajectory) -> dict:
        """One actor step and one critic step on a dreamed trajectory."""
        c = self.cfg
        H, N = traj.actions.shape
        F = traj.feats.shape[-1]
        v_slow_next = self.value(traj.feats[1:], slow=True)  # V(s_1..s_H)
        returns = lambda_returns(traj.rewards, v_slow_next, traj.continues, v_slow_next[-1], c.gamma, c.lam)
        # weight by the probability of still being inside the episode
        weight = np.concatenate([np.ones((1, N)), np.cumprod(traj.continues[:-1], axis=0)], axis=0)
        feats_t = traj.feats[:-1].reshape(H * N, F).astype(c.dtype)
        w = weight.reshape(-1).astype(c.dtype)
        R = returns.reshape(-1).astype(c.dtype)

        # critic
        self.critic_opt.zero_grad()
        v = dc.reshape(self.critic(dc.Tensor(feats_t)), (-1,))
        critic_loss = dc.mul(dc.mul(dc.square(dc.sub(v, R)), w), 0.5).mean()
        critic_loss.backward()
        self.critic_opt.step()
        adv = (R - v.data).astype(c.dtype)

        # actor
        self.actor_opt.zero_grad()
        logits = self.actor(dc.Tensor(feats_t))
        logp = dc.pick(dc.log_softmax(logits), traj.actions.reshape(-1))
        ent = dc.categorical_entropy(logits)
        objective = dc.add(dc.mul(logp, adv), dc.mul(ent, c.entropy))
        actor_loss = dc.mul(dc.mul(objective, w), -1.0).mean()
        actor_loss.backward()
        self.actor_opt.step()

        d = c.slow_critic_decay
        for k, p in self.critic.params.items():
            self.slow_critic[k] = (d * self.slow_critic[k] + (1 - d) * p.data).astype(p.data.dtype)
        self.updates += 1
        return {
            "actor_loss": float(actor_loss.data),
            "critic_loss": float(critic_loss.data),
            "entropy": float(ent.data.mean()),
            "return_mean": float(returns.mean()),
            "adv_abs": float(np.abs(adv).mean()),
        }

    # ------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "actor": {k: p.data.copy() for k, p in self.actor.params.items()},
            "critic": {k: p.data.copy() for k, p in self.critic.params.items()},
            "slow_critic": {k: v.copy() for k, v in self.slow_critic.items()},
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "updates": self.updates,
        }

    def load_state_dict(self, state: dict) -> None:
        for k, v in state["actor"].items():
            self.actor.params[k].data = np.array(v, copy=True)
        for k, v in state["critic"].items():
            self.critic.params[k].data = np.array(v, copy=True)
        self.slow_critic = {k: np.array(v, copy=True) for k, v in state["slow_critic"].items()}
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.critic_opt.load_state_dict(state["critic_opt"])
        self.updates = state["updates"]


def actor_critic_update(agent: Agent, traj: Trajectory) -> dict:
    return agent.update(traj)


def dream_rollout(wm: WorldModel, agent: Agent, start: ModelState, horizon: int, rng: np.random.Generator) -> Trajectory:
    return agent.dream_rollout(wm, start, horizon, rng)
