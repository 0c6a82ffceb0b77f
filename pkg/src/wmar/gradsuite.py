"""Randomised finite-difference checks over every differentiable op.

Each case draws small random shapes, wraps the op as ``sum(op(...) * w)``
with a random weight tensor ``w`` (so that, e.g., layer norm does not reduce
to a constant) and compares analytic and numerical gradients at float64.
The full world-model loss is checked separately on a 2-step batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .replay import Batch

OP_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class CaseResult:
    name: str
    trial: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _p(rng, *shape, scale=1.0):
    return dc.parameter(rng.normal(0.0, scale, size=shape))


def _case(name: str, rng, out_shape, op: Callable[..., dc.Tensor], **params):
    """``sum(op(**params) * w)`` for a random weight ``w`` of ``out_shape``."""
    w = rng.normal(size=out_shape)
    return name, (lambda: dc.tsum(dc.mul(op(**params), w))), params


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], dc.Tensor], dict]]:
    n = int(rng.integers(1, 4))
    d = int(rng.integers(2, 5))
    k = int(rng.integers(1, 4))
    units, classes = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    width = units * classes
    mask = rng.random((n, 1)) < 0.5
    idx = rng.integers(0, d, size=n)
    targets = (rng.random((n, d)) < 0.5).astype(float)
    kinked = rng.normal(size=(n, d))
    # keep entries away from the kink so central differences are valid
    kinked[np.abs(kinked) < 1e-3] += 0.01

    cases = [
        _case("affine", rng, (n, k), dc.affine, x=_p(rng, n, d), W=_p(rng, d, k), b=_p(rng, k)),
        _case("layer_norm", rng, (n, d), dc.layer_norm, x=_p(rng, n, d), scale=_p(rng, d), shift=_p(rng, d)),
        _case("silu", rng, (n, d), dc.silu, x=_p(rng, n, d)),
        _case("tanh", rng, (n, d), dc.tanh, x=_p(rng, n, d)),
        _case("sigmoid", rng, (n, d), dc.sigmoid, x=_p(rng, n, d)),
        _case("square", rng, (n, d), dc.square, x=_p(rng, n, d)),
        _case("add", rng, (n, d), dc.add, a=_p(rng, n, d), b=_p(rng, d)),
        _case("sub", rng, (n, d), dc.sub, a=_p(rng, n, d), b=_p(rng, n, 1)),
        _case("mul", rng, (n, d), dc.mul, a=_p(rng, n, d), b=_p(rng, n, d)),
        _case("sum_axis", rng, (n,), lambda x: dc.tsum(x, axis=1), x=_p(rng, n, d)),
        _case("mean", rng, (), dc.tmean, x=_p(rng, n, d)),
        _case("reshape", rng, (n * d,), lambda x: dc.reshape(x, (n * d,)), x=_p(rng, n, d)),
        _case("concat", rng, (n, d + k), lambda a, b: dc.concat([a, b], axis=-1), a=_p(rng, n, d), b=_p(rng, n, k)),
        _case("stack", rng, (2, n, d), lambda a, b: dc.stack([a, b]), a=_p(rng, n, d), b=_p(rng, n, d)),
        _case("maximum", rng, (n, d), lambda x: dc.maximum(x, 0.0), x=dc.parameter(kinked)),
        _case("where", rng, (n, d), lambda a, b: dc.where(mask, a, b), a=_p(rng, n, d), b=_p(rng, n, d)),
        _case("pick", rng, (n,), lambda x: dc.pick(x, idx), x=_p(rng, n, d)),
        _case(
            "gru_cell", rng, (n, d), dc.gru_cell,
            h=_p(rng, n, d), inp=_p(rng, n, k),
            Wx=_p(rng, k, 3 * d, scale=0.5), Wh=_p(rng, d, 3 * d, scale=0.5), b=_p(rng, 3 * d, scale=0.5),
        ),
        _case(
            "dense_ln_silu", rng, (n, k + 2), dc.dense_ln_silu,
            x=_p(rng, n, d), W=_p(rng, d, k + 2), b=_p(rng, k + 2), scale=_p(rng, k + 2), shift=_p(rng, k + 2),
        ),
        _case("softmax", rng, (n, width), lambda x: dc.softmax(x, classes), x=_p(rng, n, width)),
        _case("log_softmax", rng, (n, width), lambda x: dc.log_softmax(x, classes), x=_p(rng, n, width)),
        _case("categorical_entropy", rng, (n,), dc.categorical_entropy, logits=_p(rng, n, d)),
        _case("kl_categorical", rng, (n,), lambda p, q: dc.kl_categorical(p, q, classes), p=_p(rng, n, width), q=_p(rng, n, width)),
        _case("bce_with_logits", rng, (n, d), lambda x: dc.bce_with_logits(x, targets), x=_p(rng, n, d)),
    ]
    # a layer norm over two units is ±1 almost everywhere, which makes
    # central differences unreliable; keep the hidden width at 3 or more
    mlp = dc.MLP(rng, d, k + 2, 2, layers=2, dtype=np.float64)
    for prm in mlp.params.values():
        prm.data += rng.normal(0.0, 0.1, size=prm.shape)
    x = _p(rng, n, d)
    w = rng.normal(size=(n, 2))
    cases.append(("mlp", lambda: dc.tsum(dc.mul(mlp(x), w)), {"x": x, **mlp.params}))
    return cases


def check_ops(trials: int = 100, seed: int = 0, tol: float = OP_TOL) -> list[CaseResult]:
    """Run every op case ``trials`` times with fresh random shapes and values."""
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(trials):
        for name, f, params in _cases(rng):
            rep = dc.grad_check(f, params, tol=tol)
            results.append(CaseResult(name, trial, rep.max_rel_err, tol))
    return results


def tiny_batch(obs_dim: int, action_count: int, rng: np.random.Generator, B: int = 2, T: int = 2) -> Batch:
    first = np.zeros((B, T), dtype=bool)
    first[:, 0] = True
    if B > 1 and T > 1:
        first[1, 1] = True  # exercise the in-window reset path
    return Batch(
        obs=rng.normal(size=(B, T, obs_dim)),
        action=rng.integers(0, action_count, size=(B, T)),
        reward=rng.normal(size=(B, T)),
        is_first=first,
        is_terminal=rng.random((B, T)) < 0.3,
        source="fifo",
        origins=[],
    )


def check_world_model_loss(seed: int = 0, tol: float = LOSS_TOL, free_bits: float = 0.0, max_entries: int = 12) -> CaseResult:
    """Finite-difference check of the full world-model loss on a 2-step, 2-sample batch.

    Sampling is frozen (fixed seed per evaluation, exact sampling gradients)
    and stop-gradient values are pinned to the unperturbed point, so finite
    differences measure exactly the surrogate gradient training uses (KL
    balancing is not the derivative of the loss value). ``free_bits``
    defaults to 0 so that the KL terms are not clamped flat.
    """
    from .worldmodel import WorldModel, WorldModelConfig

    rng = np.random.default_rng(seed)
    cfg = WorldModelConfig(
        obs_dim=3, action_count=2, deter=4, embed=4, hidden=5, units=2, classes=3, free_bits=free_bits, dtype="float64"
    )
    wm = WorldModel(cfg, rng)
    for p in wm.params.values():
        p.data += rng.normal(0.0, 0.1, size=p.shape)
    batch = tiny_batch(cfg.obs_dim, cfg.action_count, rng)

    def f():
        total, _, _ = wm.loss(batch, np.random.default_rng(seed + 1))
        return total

    with dc.exact_sampling_gradients(), dc.frozen_stop_gradients() as freeze:
        f = freeze.wrap(f)
        rep = dc.grad_check(f, wm.params, tol=tol, max_entries=max_entries, rng=np.random.default_rng(seed + 2))
    return CaseResult("world_model_loss", 0, rep.max_rel_err, tol)


def run_all(trials: int = 100, seed: int = 0) -> tuple[list[CaseResult], CaseResult]:
    return check_ops(trials, seed), check_world_model_loss(seed)
