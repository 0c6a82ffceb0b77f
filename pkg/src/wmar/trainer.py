"""Continual-learning training loop and baseline runs.

One run walks the configured task sequence. Each task gets ``K`` iterations
of: train the world model on replay, train the actor-critic in dreams, then
collect ``steps_per_iteration`` environment steps with the current actor.
Every task in the suite is evaluated every ``eval_interval`` global steps.

All randomness comes from seeded numpy generators held in :class:`RunState`,
and the whole state pickles into a single checkpoint record, so a resumed run
continues bit-exactly.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .agent import Agent, AgentConfig, scale_reward
from .config import ExperimentConfig
from .envs import Env, make_suite, random_policy
from .evalkit import EVAL_COLUMNS, PerfCurve
from .records import atomic_write_text, load_record, save_record
from .replay import AugmentedBuffer, Step, sample_minibatch
from .worldmodel import ModelState, NonFiniteLoss, WorldModel, WorldModelConfig

log = logging.getLogger(__name__)

LOSS_COLUMNS = (
    "global_step",
    "task_trained",
    "wm_updates",
    "recon",
    "reward",
    "cont",
    "kl_dyn",
    "kl_rep",
    "actor_entropy",
    "dream_return",
)

CHECKPOINT_KIND = "wmar-run"


class MemoryBoundViolation(AssertionError):
    pass


class TrainingCrash(RuntimeError):
    """A run aborted; ``checkpoint`` points at the persisted crash state."""

    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class RunRecord:
    mode: str
    seed: int
    tasks: list[str]
    curves: dict[str, PerfCurve]
    wall_clock: float
    config_hash: str
    env_steps: dict[str, int]
    max_stored_steps: int
    capacity_steps: int
    run_dir: Path | None = None
    checkpoints: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# acting


def observe_and_act(
    wm: WorldModel,
    agent: Agent,
    state: ModelState | None,
    prev_action: np.ndarray,
    obs: np.ndarray,
    is_first: np.ndarray,
    rng: np.random.Generator,
) -> tuple[ModelState, np.ndarray]:
    """Filter one observation per row and sample the actor's next action."""
    with dc.no_grad():
        state, _, _ = wm.observe_step(state, prev_action, obs, is_first, rng, with_prior=False)
    feat = np.concatenate([state.h.data, state.z.data], axis=-1)
    return state, agent.act(feat, rng)


def evaluate_policy(
    wm: WorldModel, agent: Agent, env: Env, episodes: int, rng: np.random.Generator
) -> np.ndarray:
    """Raw episodic rewards of ``episodes`` policy-sampled episodes, run as one batch."""
    envs = [copy.deepcopy(env) for _ in range(episodes)]
    steps = [e.reset(rng) for e in envs]
    totals = np.zeros(episodes)
    done = np.zeros(episodes, dtype=bool)
    state = None
    prev = np.zeros(episodes, dtype=np.int64)
    first = np.ones(episodes, dtype=bool)
    while not done.all():
        obs = np.stack([s.observation for s in steps])
        state, actions = observe_and_act(wm, agent, state, prev, obs, first, rng)
        first[:] = False
        for i, e in enumerate(envs):
            if done[i]:
                continue
            s, d = e.step(int(actions[i]))
            steps[i] = s
            totals[i] += s.reward
            done[i] = d
        prev = actions
    return totals


# ---------------------------------------------------------------------------
# run state


@dataclass
class RunState:
    """Everything a run needs to continue; pickles into one checkpoint."""

    cfg: ExperimentConfig
    mode: str
    seed: int
    tasks: list[str]
    envs: list[Env]
    wm: WorldModel
    agent: Agent
    buffer: AugmentedBuffer
    rngs: dict[str, np.random.Generator]
    scales: dict[str, float]
    task_idx: int = 0
    iteration: int = 0
    global_step: int = 0
    collected: int = 0
    env_steps: dict[str, int] = field(default_factory=dict)
    # collector
    current: Step | None = None
    model_state: ModelState | None = None
    episode_active: bool = False
    # outputs
    eval_rows: list[tuple] = field(default_factory=list)
    loss_rows: list[tuple] = field(default_factory=list)
    max_stored_steps: int = 0
    wall_clock: float = 0.0
    last_starts: dict | None = None
    eval_envs: list | None = None

    def checkpoint_payload(self) -> dict:
        return {
            "cfg": self.cfg.to_flat(),
            "mode": self.mode,
            "seed": self.seed,
            "tasks": self.tasks,
            "envs": self.envs,
            "wm": self.wm.state_dict(),
            "agent": self.agent.state_dict(),
            "buffer": self.buffer.state_dict(),
            "rngs": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "scales": self.scales,
            "loop": (self.task_idx, self.iteration, self.global_step, self.collected),
            "env_steps": dict(self.env_steps),
            "collector": (
                self.current,
                None if self.model_state is None else (self.model_state.h.data, self.model_state.z.data),
                self.episode_active,
            ),
            "eval_rows": list(self.eval_rows),
            "loss_rows": list(self.loss_rows),
            "max_stored_steps": self.max_stored_steps,
            "wall_clock": self.wall_clock,
            "last_starts": self.last_starts,
        }

    @classmethod
    def from_payload(cls, p: dict) -> "RunState":
        from .config import from_flat

        cfg = from_flat(p["cfg"])
        st = _fresh_state(cfg, p["mode"], p["seed"], p["tasks"])
        st.envs = p["envs"]
        st.wm.load_state_dict(p["wm"])
        st.agent.load_state_dict(p["agent"])
        st.buffer = AugmentedBuffer.from_state(p["buffer"])
        for k, s in p["rngs"].items():
            st.rngs[k].bit_generator.state = s
        for e in st.envs:
            e.rng = st.rngs["env"]
        st.scales = p["scales"]
        st.task_idx, st.iteration, st.global_step, st.collected = p["loop"]
        st.env_steps = p["env_steps"]
        cur, ms, st.episode_active = p["collector"]
        st.current = cur
        st.model_state = None if ms is None else ModelState(dc.Tensor(ms[0]), dc.Tensor(ms[1]))
        st.eval_rows = p["eval_rows"]
        st.loss_rows = p["loss_rows"]
        st.max_stored_steps = p["max_stored_steps"]
        st.wall_clock = p["wall_clock"]
        st.last_starts = p["last_starts"]
        return st


def _suite_envs(suite: str, labels: list[str]) -> list[Env]:
    """Selected tasks, padded to the full suite's observation width."""
    by_label = {e.label: e for e in make_suite(suite)}
    return [by_label[t] for t in labels]


_RNG_STREAMS = ("init", "env", "act", "wm", "sample", "dream", "keys", "eval")


def _fresh_state(cfg: ExperimentConfig, mode: str, seed: int, tasks: list[str]) -> RunState:
    seqs = np.random.SeedSequence(seed).spawn(len(_RNG_STREAMS))
    rngs = {name: np.random.default_rng(s) for name, s in zip(_RNG_STREAMS, seqs)}
    envs = _suite_envs(cfg.suite, tasks)
    obs_dim, n_act = envs[0].obs_dim, envs[0].action_count
    m = cfg.model
    wm_cfg = WorldModelConfig(
        obs_dim=obs_dim,
        action_count=n_act,
        deter=m.deter,
        embed=m.embed,
        hidden=m.hidden,
        layers=m.layers,
        units=m.units,
        classes=m.classes,
        lr=m.lr,
        eps=m.eps,
        clip=m.clip,
        beta_dyn=m.beta_dyn,
        beta_rep=m.beta_rep,
        free_bits=m.free_bits,
        dtype=m.dtype,
    )
    wm = WorldModel(wm_cfg, rngs["init"])
    a = cfg.agent
    agent = Agent(
        AgentConfig(
            feat_dim=wm_cfg.feat,
            action_count=n_act,
            hidden=a.hidden,
            layers=a.layers,
            gamma=a.gamma,
            lam=a.lam,
            entropy=a.entropy,
            horizon=a.horizon,
            actor_lr=a.actor_lr,
            critic_lr=a.critic_lr,
            clip=a.clip,
            slow_critic_decay=a.slow_critic_decay,
            dtype=m.dtype,
        ),
        rngs["init"],
    )
    b = cfg.buffer
    if mode == "fifo_only":
        fifo, ltdm = b.fifo_steps + b.ltdm_chunks * b.chunk_size, 0
    else:
        fifo, ltdm = b.fifo_steps, b.ltdm_chunks
    buffer = AugmentedBuffer(fifo, ltdm, b.chunk_size, rngs["keys"])
    for e in envs:
        e.rng = rngs["env"]
    return RunState(
        cfg=cfg,
        mode=mode,
        seed=seed,
        tasks=list(tasks),
        envs=envs,
        wm=wm,
        agent=agent,
        buffer=buffer,
        rngs=rngs,
        scales={t: cfg.reward_scale[t] for t in tasks},
        env_steps={t: 0 for t in tasks},
    )


# ---------------------------------------------------------------------------
# loop pieces


def _evaluate_all(st: RunState) -> None:
    """Evaluate every task of the suite (not just the run's tasks)."""
    b = st.cfg.budget
    task_trained = st.tasks[min(st.task_idx, len(st.tasks) - 1)]
    for env in st.eval_envs:
        rewards = evaluate_policy(st.wm, st.agent, env, b.eval_episodes, st.rngs["eval"])
        value = float(np.median(rewards) if b.eval_statistic == "median" else np.mean(rewards))
        st.eval_rows.append((st.global_step, task_trained, env.label, value))


def _train(st: RunState) -> None:
    cfg = st.cfg
    b, buf = cfg.budget, cfg.buffer
    if st.collected < b.prefill_steps or len(st.buffer.fifo) == 0:
        return
    diags, ac_diags = [], []
    for _ in range(b.updates_per_iteration):
        batch = sample_minibatch(st.buffer, buf.batch_size, buf.batch_length, st.rngs["sample"])
        diag, starts = st.wm.train_step(batch, st.rngs["wm"])
        diags.append(diag)
        if b.dream_updates_per_wm_update == 0:
            continue
        h, z = starts["h"], starts["z"]
        if b.dream_starts and b.dream_starts < len(h):
            idx = st.rngs["dream"].choice(len(h), size=b.dream_starts, replace=False)
            h, z = h[idx], z[idx]
        start = ModelState(dc.Tensor(h), dc.Tensor(z))
        for _ in range(b.dream_updates_per_wm_update):
            traj = st.agent.dream_rollout(st.wm, start, cfg.agent.horizon, st.rngs["dream"])
            ac_diags.append(st.agent.update(traj))
    if diags:
        mean = lambda key, rows: float(np.mean([d[key] for d in rows])) if rows else math.nan
        st.loss_rows.append(
            (
                st.global_step,
                st.tasks[st.task_idx],
                len(diags),
                mean("recon", diags),
                mean("reward", diags),
                mean("cont", diags),
                mean("kl_dyn", diags),
                mean("kl_rep", diags),
                mean("entropy", ac_diags),
                mean("return_mean", ac_diags),
            )
        )


def _collect(st: RunState, n: int) -> None:
    task = st.tasks[st.task_idx]
    env = st.envs[st.task_idx]
    random_phase_limit = st.cfg.budget.prefill_steps
    act_rng = st.rngs["act"]
    for _ in range(n):
        if not st.episode_active:
            st.current = env.reset()
            st.episode_active = True
            st.model_state = None
            st.buffer.add_step(st.current, st.task_idx)
        s = st.current
        st.model_state, action = observe_and_act(
            st.wm, st.agent, st.model_state, np.array([s.action]), s.observation[None], np.array([s.is_first]), act_rng
        )
        a = int(action[0])
        if st.collected < random_phase_limit:
            a = int(act_rng.integers(env.action_count))
        nxt, done = env.step(a)
        nxt = Step(nxt.observation, nxt.action, scale_reward(nxt.reward, task, st.scales), nxt.is_first, nxt.is_terminal)
        st.buffer.add_step(nxt, st.task_idx)
        st.current = nxt
        st.collected += 1
        st.env_steps[task] += 1
        if done:
            st.episode_active = False
        stored = st.buffer.stored_steps()
        st.max_stored_steps = max(st.max_stored_steps, stored)
        if stored > st.buffer.capacity_steps:
            raise MemoryBoundViolation(f"stored {stored} steps > capacity {st.buffer.capacity_steps}")


# ---------------------------------------------------------------------------
# output


def _csv_text(columns, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return out.getvalue()


def _curves(rows) -> dict[str, PerfCurve]:
    by: dict[str, list] = {}
    for g, _, task, v in rows:
        by.setdefault(task, []).append((g, v))
    return {t: PerfCurve.from_pairs(v) for t, v in by.items()}


def _write_outputs(st: RunState, run_dir: Path | None, checkpoints: list[str]) -> RunRecord:
    rec = RunRecord(
        mode=st.mode,
        seed=st.seed,
        tasks=st.tasks,
        curves=_curves(st.eval_rows),
        wall_clock=st.wall_clock,
        config_hash=st.cfg.config_hash(),
        env_steps=dict(st.env_steps),
        max_stored_steps=st.max_stored_steps,
        capacity_steps=st.buffer.capacity_steps,
        run_dir=run_dir,
        checkpoints=checkpoints,
    )
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(run_dir / "metrics.csv", _csv_text(EVAL_COLUMNS, st.eval_rows))
        atomic_write_text(run_dir / "losses.csv", _csv_text(LOSS_COLUMNS, st.loss_rows))
        summary = {
            "mode": rec.mode,
            "seed": rec.seed,
            "tasks": rec.tasks,
            "config_hash": rec.config_hash,
            "wall_clock_seconds": rec.wall_clock,
            "env_steps": rec.env_steps,
            "max_stored_steps": rec.max_stored_steps,
            "capacity_steps": rec.capacity_steps,
            "checkpoints": checkpoints,
            "complete": st.task_idx >= len(st.tasks),
        }
        atomic_write_text(run_dir / "record.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rec


def save_checkpoint(st: RunState, path: Path) -> Path:
    save_record(path, CHECKPOINT_KIND, st.checkpoint_payload())
    return path


def load_checkpoint(path: str | Path) -> RunState:
    return RunState.from_payload(load_record(path, CHECKPOINT_KIND))


# ---------------------------------------------------------------------------
# drivers


def _drive(st: RunState, run_dir: Path | None, stop_at_step: int | None = None) -> RunRecord:
    """Run (or continue) the loop until the task list is exhausted.

    With ``stop_at_step`` the run halts at that global step, writes a
    checkpoint and returns a partial record; :func:`resume` picks it up.
    """
    b = st.cfg.budget
    st.eval_envs = _suite_envs(st.cfg.suite, st.cfg.task_labels())
    checkpoints: list[str] = []
    t0 = time.perf_counter() - st.wall_clock

    def ckpt(name: str) -> None:
        if run_dir is not None:
            st.wall_clock = time.perf_counter() - t0
            p = save_checkpoint(st, run_dir / name)
            checkpoints.append(p.name)

    if st.global_step == 0 and not st.eval_rows:
        _evaluate_all(st)
    try:
        while st.task_idx < len(st.tasks):
            if st.iteration == 0 and st.env_steps[st.tasks[st.task_idx]] == 0:
                st.episode_active = False  # every task starts on a fresh episode
            while st.iteration < b.K:
                if stop_at_step is not None and st.global_step >= stop_at_step:
                    ckpt("checkpoint.rec")
                    st.wall_clock = time.perf_counter() - t0
                    return _write_outputs(st, run_dir, checkpoints)
                _train(st)
                _collect(st, b.steps_per_iteration)
                st.global_step += b.steps_per_iteration
                st.iteration += 1
                if st.global_step % b.eval_interval == 0:
                    _evaluate_all(st)
                if b.checkpoint_every and st.iteration % b.checkpoint_every == 0:
                    ckpt("checkpoint.rec")
            st.task_idx += 1
            st.iteration = 0
    except (NonFiniteLoss, dc.NonFiniteError, MemoryBoundViolation) as e:
        path = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            path = save_checkpoint(st, run_dir / "crash.rec")
        raise TrainingCrash(f"{type(e).__name__}: {e}", path) from e
    st.wall_clock = time.perf_counter() - t0
    return _write_outputs(st, run_dir, checkpoints)


def _run_tasks(cfg: ExperimentConfig, mode: str, seed: int, tasks: list[str], run_dir, stop_at_step=None) -> RunRecord:
    st = _fresh_state(cfg, mode, seed, tasks)
    return _drive(st, Path(run_dir) if run_dir is not None else None, stop_at_step)


def run_continual(cfg: ExperimentConfig, seed: int, run_dir=None, stop_at_step: int | None = None) -> RunRecord:
    """WMAR: FIFO plus reservoir, tasks in the configured order."""
    return _run_tasks(cfg, "wmar", seed, cfg.task_labels(), run_dir, stop_at_step)


def run_ablation_fifo_only(cfg: ExperimentConfig, seed: int, run_dir=None, stop_at_step: int | None = None) -> RunRecord:
    """Same loop with the reservoir disabled and the FIFO doubled to equal total memory."""
    return _run_tasks(cfg, "fifo_only", seed, cfg.task_labels(), run_dir, stop_at_step)


def run_single_task(cfg: ExperimentConfig, task: str, seed: int, run_dir=None, stop_at_step: int | None = None) -> RunRecord:
    """Fresh agent trained on ``task`` alone; evaluation still covers only that task."""
    single = cfg.replace(task_order=[task])
    return _run_tasks(single, "single_task", seed, [task], run_dir, stop_at_step)


def resume(checkpoint: str | Path, run_dir=None, stop_at_step: int | None = None) -> RunRecord:
    st = load_checkpoint(checkpoint)
    if run_dir is None:
        run_dir = Path(checkpoint).parent
    return _drive(st, Path(run_dir), stop_at_step)


def run_random(cfg: ExperimentConfig, seed: int, run_dir=None) -> dict[str, float]:
    """Random-policy baseline per task; writes its episodes in the metrics CSV format."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(len(_RNG_STREAMS) + 1)[-1])
    rows, means = [], {}
    for env in _suite_envs(cfg.suite, cfg.task_labels()):
        curve = random_policy(env, cfg.budget.random_episodes, rng)
        means[env.label] = float(curve.values.mean())
        rows.extend((int(s), env.label, env.label, float(v)) for s, v in zip(curve.steps, curve.values))
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(run_dir / "metrics.csv", _csv_text(EVAL_COLUMNS, rows))
        atomic_write_text(run_dir / "random_means.json", json.dumps(means, indent=2, sort_keys=True) + "\n")
    return means


def derive_reward_scales(single_task_finals: dict[str, list[float]]) -> dict[str, float]:
    """1 / (trained single-task mean episodic reward), rounded to one significant figure."""
    out = {}
    for task, finals in single_task_finals.items():
        m = float(np.mean(finals))
        if m <= 0:
            raise ValueError(f"{task}: single-task reward {m} is not positive; cannot derive a scale")
        s = 1.0 / m
        out[task] = float(f"{s:.0e}")
    return out
