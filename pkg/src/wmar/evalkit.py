"""Continual-learning metrics over evaluation curves.

Curves are step functions: the value at step ``n`` is the last recorded value
at or before ``n``. Window means are exact per-integer-step averages under
that interpolation, so each recorded point is weighted by the gap it covers.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class DegenerateBaseline(ValueError):
    pass


@dataclass(frozen=True)
class PerfCurve:
    steps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if steps.shape != values.shape or steps.ndim != 1:
            raise ValueError("steps and values must be matching 1-D sequences")
        if steps.size and np.any(np.diff(steps) <= 0):
            raise ValueError("curve steps must be strictly increasing")
        if not np.isfinite(values).all():
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "PerfCurve":
        pairs = list(pairs)
        return cls(np.array([p[0] for p in pairs], dtype=np.int64), np.array([p[1] for p in pairs], dtype=float))

    def __len__(self) -> int:
        return len(self.steps)

    def at(self, n: int) -> float:
        i = int(np.searchsorted(self.steps, n, side="right")) - 1
        if i < 0:
            raise KeyError(f"curve has no point at or before step {n}")
        return float(self.values[i])

    def window_mean(self, start: int, end: int) -> float:
        """Mean of ``at(n)`` over integer ``n`` in (start, end]."""
        if end <= start:
            raise ValueError("empty window")
        if len(self.steps) == 0 or self.steps[0] > start + 1:
            raise KeyError(f"curve undefined at step {start + 1}")
        # segment k covers [steps[k], steps[k+1]) ∩ (start, end]
        lo = np.maximum(self.steps, start + 1)
        hi = np.minimum(np.append(self.steps[1:], np.iinfo(np.int64).max), end + 1)
        counts = np.clip(hi - lo, 0, None)
        return float((counts * self.values).sum() / (end - start))

    def map(self, fn) -> "PerfCurve":
        return PerfCurve(self.steps.copy(), np.array([fn(v) for v in self.values]))


def normalize(p: float, p_rand: float, p_single: float) -> float:
    """Score where 0 is the random policy and 1 the single-task agent."""
    denom = p_single - p_rand
    if denom == 0:
        raise DegenerateBaseline("single-task and random baselines coincide")
    return (p - p_rand) / denom


def normalize_curve(curve: PerfCurve, p_rand: float, p_single: float) -> PerfCurve:
    normalize(0.0, p_rand, p_single)
    return PerfCurve(curve.steps.copy(), (curve.values - p_rand) / (p_single - p_rand))


def forgetting(q_curves: Sequence[PerfCurve], N: int) -> tuple[float, list[float]]:
    """Average drop from the end of each task's own training to the end of the suite."""
    T = len(q_curves)
    parts = [q.at(tau * N) - q.at(T * N) for tau, q in enumerate(q_curves, start=1)]
    return float(sum(parts) / T), parts


def forward_transfer(
    q_cl: Sequence[PerfCurve], q_single: Sequence[PerfCurve], N: int
) -> tuple[float, list[float | None], list[str]]:
    """Average relative gain of in-suite learning over learning from scratch.

    Tasks whose single-task window mean is zero are excluded (with a warning
    message in the third return value) and the average is over the rest.
    """
    parts: list[float | None] = []
    notes = []
    for tau, (qc, qs) in enumerate(zip(q_cl, q_single), start=1):
        s_cl = qc.window_mean((tau - 1) * N, tau * N)
        s_st = qs.window_mean(0, N)
        if s_st == 0:
            parts.append(None)
            notes.append(f"task {tau}: single-task window mean is zero; excluded from forward transfer")
            continue
        parts.append((s_cl - s_st) / s_st)
    used = [x for x in parts if x is not None]
    ft = float(sum(used) / len(used)) if used else float("nan")
    return ft, parts, notes


def quantiles(values: Sequence[float]) -> tuple[float, float, float]:
    """(median, 0.25 quantile, 0.75 quantile) with linear interpolation."""
    if len(values) == 0:
        raise ValueError("no values to aggregate")
    arr = np.asarray(values, dtype=float)
    q25, med, q75 = np.quantile(arr, [0.25, 0.5, 0.75])
    return float(med), float(q25), float(q75)


@dataclass
class SuiteMetrics:
    tasks: list[str]
    q_curves: dict[str, PerfCurve]
    avg_forgetting: float
    avg_fwd_transfer: float
    forgetting_parts: dict[str, float] = field(default_factory=dict)
    transfer_parts: dict[str, float | None] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def suite_metrics(
    tasks: Sequence[str],
    cl_curves: Mapping[str, PerfCurve],
    single_curves: Mapping[str, PerfCurve],
    random_means: Mapping[str, float],
    N: int,
    single_reference: Mapping[str, float] | None = None,
) -> SuiteMetrics:
    """Normalise raw curves against baselines and compute F and FT.

    The single-task reference for a task is ``single_reference[task]`` if
    given, else its single-task curve at step ``N`` (end of training).
    """
    tasks = list(tasks)
    kept, excluded, notes = [], [], []
    q_cl, q_st = {}, {}
    for t in tasks:
        p_rand = random_means[t]
        p_single = single_reference[t] if single_reference is not None else single_curves[t].at(N)
        try:
            q_cl[t] = normalize_curve(cl_curves[t], p_rand, p_single)
            q_st[t] = normalize_curve(single_curves[t], p_rand, p_single)
            kept.append(t)
        except DegenerateBaseline:
            excluded.append(t)
            msg = f"{t}: degenerate baseline (single-task == random = {p_rand}); task excluded"
            notes.append(msg)
            warnings.warn(msg)
    if not kept:
        raise DegenerateBaseline("every task has a degenerate baseline")
    T = len(tasks)
    # positions in the suite stay fixed even when a task is excluded
    f_parts = {t: q_cl[t].at((tasks.index(t) + 1) * N) - q_cl[t].at(T * N) for t in kept}
    ft_parts: dict[str, float | None] = {}
    for t in kept:
        tau = tasks.index(t) + 1
        s_cl = q_cl[t].window_mean((tau - 1) * N, tau * N)
        s_st = q_st[t].window_mean(0, N)
        if s_st == 0:
            ft_parts[t] = None
            notes.append(f"{t}: single-task window mean is zero; excluded from forward transfer")
        else:
            ft_parts[t] = (s_cl - s_st) / s_st
    ft_used = [v for v in ft_parts.values() if v is not None]
    return SuiteMetrics(
        tasks=tasks,
        q_curves=q_cl,
        avg_forgetting=float(sum(f_parts.values()) / len(f_parts)),
        avg_fwd_transfer=float(sum(ft_used) / len(ft_used)) if ft_used else math.nan,
        forgetting_parts=f_parts,
        transfer_parts=ft_parts,
        excluded=excluded,
        notes=notes,
    )


def aggregate_seeds(metrics: Sequence[SuiteMetrics]) -> dict[str, tuple[float, float, float]]:
    """Median and quartiles of F and FT across seeds."""
    if not metrics:
        raise ValueError("aggregate_seeds needs at least one seed")
    return {
        "avg_forgetting": quantiles([m.avg_forgetting for m in metrics]),
        "avg_fwd_transfer": quantiles([m.avg_fwd_transfer for m in metrics]),
    }


# ---------------------------------------------------------------------------
# CSV I/O

EVAL_COLUMNS = ("global_step", "task_trained", "eval_task", "episodic_reward")
TABLE_COLUMNS = (
    "model",
    "avg_forgetting_median",
    "avg_forgetting_q25",
    "avg_forgetting_q75",
    "avg_fwd_transfer_median",
    "avg_fwd_transfer_q25",
    "avg_fwd_transfer_q75",
)


def read_eval_csv(path: str | Path) -> dict[str, PerfCurve]:
    """Load a trainer metrics CSV into one raw curve per evaluated task."""
    rows: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != EVAL_COLUMNS:
            raise ValueError(f"{path}: expected columns {EVAL_COLUMNS}, got {reader.fieldnames}")
        for r in reader:
            rows.setdefault(r["eval_task"], []).append((int(r["global_step"]), float(r["episodic_reward"])))
    return {t: PerfCurve.from_pairs(sorted(v)) for t, v in rows.items()}


def table_rows(model_metrics: Mapping[str, Sequence[SuiteMetrics]]) -> list[dict]:
    rows = []
    for model, ms in model_metrics.items():
        agg = aggregate_seeds(ms)
        f, ft = agg["avg_forgetting"], agg["avg_fwd_transfer"]
        rows.append(dict(zip(TABLE_COLUMNS, (model, *f, *ft))))
    return rows


def component_rows(model: str, metrics: Sequence[SuiteMetrics]) -> list[dict]:
    rows = []
    for seed_idx, m in enumerate(metrics):
        for t in m.tasks:
            rows.append(
                {
                    "model": model,
                    "seed_index": seed_idx,
                    "task": t,
                    "forgetting": m.forgetting_parts.get(t, ""),
                    "fwd_transfer": "" if m.transfer_parts.get(t) is None else m.transfer_parts[t],
                    "excluded": t in m.excluded,
                }
            )
    return rows
