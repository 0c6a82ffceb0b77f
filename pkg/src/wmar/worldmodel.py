"""Recurrent state-space world model with discrete latents.

The deterministic state ``h`` is advanced by a GRU fed ``[z, onehot(a)]``;
the stochastic state ``z`` is a set of one-hot categoricals drawn from the
posterior (with an observation) or the prior (in dreams).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import MLP, Tensor
from .replay import AugmentedBuffer, Batch, sample_minibatch


@dataclass
class WorldModelConfig:
    obs_dim: int
    action_count: int
    deter: int = 128
    embed: int = 128
    hidden: int = 128
    layers: int = 2
    units: int = 8
    classes: int = 8
    lr: float = 4e-4
    eps: float = 1e-8
    clip: float = 100.0
    beta_dyn: float = 0.5
    beta_rep: float = 0.1
    free_bits: float = 1.0
    dtype: str = "float32"

    @property
    def stoch(self) -> int:
        return self.units * self.classes

    @property
    def feat(self) -> int:
        return self.deter + self.stoch


@dataclass
class ModelState:
    h: Tensor
    z: Tensor

    def features(self) -> Tensor:
        return dc.concat([self.h, self.z], axis=-1)

    def detach(self) -> "ModelState":
        return ModelState(dc.stop_gradient(self.h), dc.stop_gradient(self.z))


class NonFiniteLoss(FloatingPointError):
    def __init__(self, diagnostics: dict):
        super().__init__(f"non-finite world-model loss: {diagnostics}")
        self.diagnostics = diagnostics


class WorldModel:
    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        c = cfg
        self.encoder = MLP(rng, c.obs_dim, c.hidden, c.embed, c.layers, dt)
        self.posterior = MLP(rng, c.deter + c.embed, c.hidden, c.stoch, c.layers, dt)
        self.prior = MLP(rng, c.deter, c.hidden, c.stoch, c.layers, dt)
        self.decoder = MLP(rng, c.feat, c.hidden, c.obs_dim, c.layers, dt)
        self.reward_head = MLP(rng, c.feat, c.hidden, 1, c.layers, dt, out_scale=0.0)
        self.cont_head = MLP(rng, c.feat, c.hidden, 1, c.layers, dt)
        n_in = c.stoch + c.action_count
        Wx, _ = dc.init_linear(rng, n_in, 3 * c.deter, dt)
        Wh, _ = dc.init_linear(rng, c.deter, 3 * c.deter, dt)
        self.gru = {"Wx": Wx, "Wh": Wh, "b": dc.parameter(np.zeros(3 * c.deter, dtype=dt))}
        self.h0 = dc.parameter(np.zeros(c.deter, dtype=dt))
        self.params: dict[str, Tensor] = {"h0": self.h0}
        for name, part in self._parts().items():
            for k, p in part.items():
                self.params[f"{name}.{k}"] = p
        self.opt = dc.Adam(self.params, lr=c.lr, eps=c.eps, clip=c.clip)

    def _parts(self) -> dict[str, dict[str, Tensor]]:
        return {
            "encoder": self.encoder.params,
            "posterior": self.posterior.params,
            "prior": self.prior.params,
            "decoder": self.decoder.params,
            "reward": self.reward_head.params,
            "cont": self.cont_head.params,
            "gru": self.gru,
        }

    # ------------------------------------------------------------------
    # state transitions

    def _onehot(self, action: np.ndarray, mask_zero: np.ndarray | None = None) -> np.ndarray:
        a = np.asarray(action, dtype=np.int64).reshape(-1)
        out = np.zeros((a.size, self.cfg.action_count), dtype=self.cfg.dtype)
        out[np.arange(a.size), a] = 1.0
        if mask_zero is not None:
            out[np.asarray(mask_zero, dtype=bool).reshape(-1)] = 0.0
        return out

    def initial_state(self, batch: int, rng: np.random.Generator) -> ModelState:
        """Learned ``h0`` broadcast to ``batch`` rows; ``z0`` drawn from the prior at ``h0``."""
        h = dc.add(dc.Tensor(np.zeros((batch, self.cfg.deter), dtype=self.cfg.dtype)), self.h0)
        z = dc.categorical_sample_st(self.prior(h), rng, self.cfg.classes)
        return ModelState(h, z)

    def _advance(self, state: ModelState, action_onehot: np.ndarray) -> Tensor:
        g = self.gru
        inp = dc.concat([state.z, dc.Tensor(action_onehot)], axis=-1)
        return dc.gru_cell(state.h, inp, g["Wx"], g["Wh"], g["b"])

    def _reset_rows(
        self, state: ModelState, is_first: np.ndarray, rng: np.random.Generator, init: ModelState | None = None
    ) -> ModelState:
        mask = np.asarray(is_first, dtype=bool).reshape(-1)
        if not mask.any():
            return state
        if init is None:
            init = self.initial_state(mask.size, rng)
        if mask.all():
            return init
        m = mask[:, None]
        return ModelState(dc.where(m, init.h, state.h), dc.where(m, init.z, state.z))

    def observe_step(
        self,
        state: ModelState,
        action: np.ndarray,
        obs: np.ndarray,
        is_first: np.ndarray,
        rng: np.random.Generator,
        embed: Tensor | None = None,
        init: ModelState | None = None,
        with_prior: bool = True,
    ) -> tuple[ModelState, Tensor, Tensor | None]:
        """One filtering step; returns (next state, posterior logits, prior logits).

        Rows flagged ``is_first`` start from the initial state (``init`` if
        given, else freshly drawn) with a zero action.
        """
        is_first = np.asarray(is_first, dtype=bool).reshape(-1)
        obs = np.asarray(obs, dtype=self.cfg.dtype).reshape(is_first.size, -1)
        if not np.isfinite(obs).all():
            raise ValueError("non-finite observation")
        state = self._reset_rows(state, is_first, rng, init)
        h = self._advance(state, self._onehot(action, is_first))
        prior_logits = self.prior(h) if with_prior else None
        if embed is None:
            embed = self.encoder(dc.Tensor(obs))
        post_logits = self.posterior(dc.concat([h, embed], axis=-1))
        z = dc.categorical_sample_st(post_logits, rng, self.cfg.classes)
        return ModelState(h, z), post_logits, prior_logits

    def dream_step(self, state: ModelState, action: np.ndarray, rng: np.random.Generator) -> ModelState:
        """Open-loop step: like ``observe_step`` but ``z`` comes from the prior."""
        h = self._advance(state, self._onehot(action))
        z = dc.categorical_sample_st(self.prior(h), rng, self.cfg.classes)
        return ModelState(h, z)

    def heads(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        """Predicted reward and continue logit for feature rows."""
        return dc.reshape(self.reward_head(feat), (-1,)), dc.reshape(self.cont_head(feat), (-1,))

    # ------------------------------------------------------------------
    # training

    def loss(self, batch: Batch, rng: np.random.Generator) -> tuple[Tensor, dict, dict]:
        """Sequence loss averaged over batch and time.

        Returns (loss, diagnostics, posterior states as arrays [T*B, ...]).
        The first step of every window starts from the initial state.
        """
        c = self.cfg
        B, T = batch.action.shape
        obs = np.ascontiguousarray(batch.obs.transpose(1, 0, 2), dtype=c.dtype)  # [T, B, D]
        act = batch.action.T
        first = batch.is_first.T.copy()
        first[0] = True
        emb_all = self.encoder(dc.Tensor(obs.reshape(T * B, -1)))
        init = self.initial_state(B, rng)
        state = init
        hs, zs, posts = [], [], []
        for t in range(T):
            emb_t = _rows(emb_all, t * B, (t + 1) * B)
            state, post, _ = self.observe_step(
                state, act[t], obs[t], first[t], rng, embed=emb_t, init=init, with_prior=False
            )
            hs.append(state.h)
            zs.append(state.z)
            posts.append(post)
        H = dc.concat(hs, axis=0)
        Z = dc.concat(zs, axis=0)
        post = dc.concat(posts, axis=0)
        prior = self.prior(H)
        feat = dc.concat([H, Z], axis=-1)
        target = dc.Tensor(obs.reshape(T * B, -1))
        recon = dc.mul(dc.tsum(dc.square(dc.sub(self.decoder(feat), target)), axis=1), 0.5).mean()
        r_hat, c_logit = self.heads(feat)
        rew = dc.mul(dc.square(dc.sub(r_hat, batch.reward.T.reshape(-1).astype(c.dtype))), 0.5).mean()
        cont_target = 1.0 - batch.is_terminal.T.reshape(-1).astype(c.dtype)
        cont = dc.bce_with_logits(c_logit, cont_target).mean()
        kl_dyn = dc.maximum(dc.kl_categorical(dc.stop_gradient(post), prior, c.classes), c.free_bits).mean()
        kl_rep = dc.maximum(dc.kl_categorical(post, dc.stop_gradient(prior), c.classes), c.free_bits).mean()
        total = recon + rew + cont + c.beta_dyn * kl_dyn + c.beta_rep * kl_rep
        diag = {
            "loss": float(total.data),
            "recon": float(recon.data),
            "reward": float(rew.data),
            "cont": float(cont.data),
            "kl_dyn": float(kl_dyn.data),
            "kl_rep": float(kl_rep.data),
        }
        if not np.isfinite(total.data):
            raise NonFiniteLoss(diag)
        starts = {"h": H.data.copy(), "z": Z.data.copy()}
        return total, diag, starts

    def train_step(self, batch: Batch, rng: np.random.Generator) -> tuple[dict, dict]:
        self.opt.zero_grad()
        total, diag, starts = self.loss(batch, rng)
        total.backward()
        diag["grad_norm"] = self.opt.step()
        return diag, starts

    # ------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {"params": {k: p.data.copy() for k, p in self.params.items()}, "opt": self.opt.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state["params"].items():
            self.params[k].data = np.array(v, copy=True)
        self.opt.load_state_dict(state["opt"])


def _rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Differentiable row slice ``x[lo:hi]``."""
    n = x.shape[0]

    def bw(g):
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        out[lo:hi] = g
        return (out,)

    return dc._make(x.data[lo:hi], (x,), bw, "rows")


def train_wm(
    wm: WorldModel,
    buffer: AugmentedBuffer,
    iterations: int,
    batch_size: int,
    batch_length: int,
    rng: np.random.Generator,
    sample_rng: np.random.Generator | None = None,
) -> list[dict]:
    """Run ``iterations`` optimiser steps on fresh minibatches; returns per-step diagnostics."""
    if len(buffer) == 0 and iterations > 0:
        raise ValueError("cannot train on an empty buffer")
    sample_rng = sample_rng or rng
    history = []
    for _ in range(iterations):
        batch = sample_minibatch(buffer, batch_size, batch_length, sample_rng)
        diag, _ = wm.train_step(batch, rng)
        diag["source"] = batch.source
        history.append(diag)
    return history
