"""Experiment configuration: dataclasses plus a flat dotted key-value format.

A config file is plain text, one ``key = value`` per line, ``#`` starts a
comment. Keys are dotted paths into :class:`ExperimentConfig`, for example::

    suite = distinct4
    seeds = 0,1,2,3,4
    budget.N = 10000
    buffer.fifo_steps = 4096
    reward_scale.bandit = 0.001

Unknown keys, malformed values and failed validation raise
:class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

MODES = ("wmar", "fifo_only", "single_task", "random")


class ConfigError(ValueError):
    pass


@dataclass
class BudgetConfig:
    N: int = 40_000
    steps_per_iteration: int = 200
    train_ratio: float = 0.5
    prefill_steps: int = 1_000
    eval_interval: int = 2_000
    eval_episodes: int = 10
    eval_statistic: str = "median"
    random_episodes: int = 100
    dream_updates_per_wm_update: int = 1
    dream_starts: int = 0  # 0 means every posterior state of the last batch
    checkpoint_every: int = 0  # iterations; 0 disables periodic checkpoints

    @property
    def K(self) -> int:
        return self.N // self.steps_per_iteration

    @property
    def updates_per_iteration(self) -> int:
        return int(round(self.train_ratio * self.steps_per_iteration))


@dataclass
class BufferConfig:
    fifo_steps: int = 4096
    ltdm_chunks: int = 64
    chunk_size: int = 64
    batch_size: int = 16
    batch_length: int = 32


@dataclass
class ModelConfig:
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


@dataclass
class AgentSettings:
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


@dataclass
class ExperimentConfig:
    suite: str = "shared4"
    task_order: list = field(default_factory=list)
    mode: str = "wmar"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentSettings = field(default_factory=AgentSettings)
    reward_scale: dict = field(default_factory=dict)

    # ------------------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        from .envs import SUITES, suite_labels

        errs = []
        b, buf, m, a = self.budget, self.buffer, self.model, self.agent
        if self.suite not in SUITES:
            errs.append(f"suite: unknown suite {self.suite!r} (known: {', '.join(sorted(SUITES))})")
        else:
            labels = suite_labels(self.suite)
            bad = [t for t in self.task_order if t not in labels]
            if bad:
                errs.append(f"task_order: {bad} not in suite {self.suite} ({labels})")
            if len(set(self.task_order)) != len(self.task_order):
                errs.append("task_order: duplicate task")
            for t in self.task_labels() if not bad else []:
                if self.mode != "random" and t not in self.reward_scale:
                    errs.append(f"reward_scale.{t}: missing reward scale for task {t!r}")
        if self.mode not in MODES:
            errs.append(f"mode: must be one of {MODES}")
        if not self.seeds:
            errs.append("seeds: at least one seed is required")
        for k, v in self.reward_scale.items():
            if not v > 0:
                errs.append(f"reward_scale.{k}: must be positive")
        if b.N < 0 or b.steps_per_iteration <= 0:
            errs.append("budget: N must be >= 0 and steps_per_iteration > 0")
        elif b.N % b.steps_per_iteration:
            errs.append("budget.N must be a multiple of budget.steps_per_iteration")
        if b.train_ratio < 0:
            errs.append("budget.train_ratio must be >= 0")
        if b.eval_interval <= 0 or b.eval_interval % b.steps_per_iteration:
            errs.append("budget.eval_interval must be a positive multiple of steps_per_iteration")
        if b.eval_episodes < 1 or b.random_episodes < 1:
            errs.append("budget.eval_episodes and budget.random_episodes must be >= 1")
        if b.eval_statistic not in ("median", "mean"):
            errs.append("budget.eval_statistic must be 'median' or 'mean'")
        if b.prefill_steps < 0 or b.dream_updates_per_wm_update < 0 or b.dream_starts < 0 or b.checkpoint_every < 0:
            errs.append("budget: counts must be non-negative")
        if buf.chunk_size < 2:
            errs.append("buffer.chunk_size must be >= 2")
        if buf.batch_length > buf.chunk_size:
            errs.append("buffer.batch_length cannot exceed buffer.chunk_size")
        if buf.fifo_steps < buf.chunk_size:
            errs.append("buffer.fifo_steps must hold at least one chunk")
        if buf.ltdm_chunks < 0 or buf.batch_size < 1 or buf.batch_length < 1:
            errs.append("buffer: sizes must be positive")
        if self.mode == "wmar" and buf.ltdm_chunks == 0:
            errs.append("buffer.ltdm_chunks must be > 0 in wmar mode")
        for name in ("deter", "embed", "hidden", "layers", "units", "classes"):
            if getattr(m, name) < 1:
                errs.append(f"model.{name} must be >= 1")
        if m.dtype not in ("float32", "float64"):
            errs.append("model.dtype must be float32 or float64")
        if not 0 < a.gamma < 1:
            errs.append("agent.gamma must lie in (0, 1)")
        if not 0 <= a.lam <= 1:
            errs.append("agent.lam must lie in [0, 1]")
        if a.horizon < 1:
            errs.append("agent.horizon must be >= 1")
        if a.entropy < 0:
            errs.append("agent.entropy must be >= 0")
        if not 0 <= a.slow_critic_decay < 1:
            errs.append("agent.slow_critic_decay must lie in [0, 1)")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def task_labels(self) -> list[str]:
        from .envs import suite_labels

        return list(self.task_order) or suite_labels(self.suite)

    def to_flat(self) -> dict[str, Any]:
        return _flatten(dataclasses.asdict(self))

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.to_flat().items()))

    def config_hash(self, exclude: tuple[str, ...] = ("seeds", "output_dir")) -> str:
        """Stable digest of everything that affects a single run's outcome."""
        flat = {k: v for k, v in self.to_flat().items() if k.split(".")[0] not in exclude}
        blob = json.dumps(flat, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        flat = self.to_flat()
        for k, v in overrides.items():
            flat[k] = v
        return from_flat(flat)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k != "reward_scale":
            out.update(_flatten(v, key + "."))
        elif k == "reward_scale":
            for label, scale in v.items():
                out[f"reward_scale.{label}"] = scale
        else:
            out[key] = v
    return out


def _fmt(v: Any) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: Any, typ: Any, key: str) -> Any:
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if typ is list and isinstance(raw, (list, tuple)):
            return list(raw)
        if isinstance(raw, typ):
            return raw
        raw = str(raw)
    text = raw.strip()
    try:
        if typ is int:
            return int(text.replace("_", ""))
        if typ is float:
            return float(text)
        if typ is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if typ is list:
            return [p.strip() for p in text.split(",") if p.strip()]
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


_SECTIONS = {"budget": BudgetConfig, "buffer": BufferConfig, "model": ModelConfig, "agent": AgentSettings}


def from_flat(flat: dict[str, Any]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    top_types = get_type_hints(ExperimentConfig)
    for key, raw in flat.items():
        parts = key.split(".")
        if parts[0] == "reward_scale":
            if len(parts) != 2 or not parts[1]:
                raise ConfigError(f"{key}: expected reward_scale.<task label>")
            cfg.reward_scale[parts[1]] = _coerce(raw, float, key)
        elif parts[0] in _SECTIONS:
            if len(parts) != 2:
                raise ConfigError(f"unknown key {key!r}")
            section = getattr(cfg, parts[0])
            types = get_type_hints(_SECTIONS[parts[0]])
            if parts[1] not in types:
                raise ConfigError(f"unknown key {key!r}")
            setattr(section, parts[1], _coerce(raw, types[parts[1]], key))
        elif len(parts) == 1 and parts[0] in top_types:
            val = _coerce(raw, top_types[parts[0]], key)
            if key == "seeds":
                try:
                    val = [int(s) for s in val]
                except ValueError:
                    raise ConfigError(f"seeds: expected comma-separated integers, got {raw!r}") from None
            setattr(cfg, key, val)
        else:
            raise ConfigError(f"unknown key {key!r}")
    return cfg


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in flat:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        flat[key] = value
    return flat


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    flat = parse_text(text, str(path))
    flat.update(overrides or {})
    return from_flat(flat).validate()


def loads_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    flat = parse_text(text)
    flat.update(overrides or {})
    return from_flat(flat).validate()
