"""Command-line entry point: ``wmar run|eval|chart|validate-config|grad-check``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
Outputs go under ``$WMAR_OUTPUT_ROOT`` (or the config's ``output_dir``) as::

    <root>/<suite>-<suite hash>/<mode>/manifest.json
                                      /aggregate.csv
                                      /seed<k>/metrics.csv, losses.csv, record.json, checkpoint.rec
    (single_task mode adds a task level: <mode>/<task>/seed<k>/...)
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import MODES, ConfigError, ExperimentConfig, from_flat, load_config
from .evalkit import (
    EVAL_COLUMNS,
    TABLE_COLUMNS,
    PerfCurve,
    component_rows,
    quantiles,
    read_eval_csv,
    suite_metrics,
    table_rows,
)
from .records import atomic_write_bytes, atomic_write_text

OUTPUT_ROOT_ENV = "WMAR_OUTPUT_ROOT"
NORMALIZED_COLUMNS = ("model", "seed_index", "global_step", "task_trained", "eval_task", "normalized")

log = logging.getLogger("wmar")


class UsageError(Exception):
    """Bad input that is not a config problem (missing artifacts, mismatched runs)."""


# ---------------------------------------------------------------------------
# helpers


def suite_hash(cfg: ExperimentConfig) -> str:
    """Digest shared by every mode of one experiment (baselines included)."""
    return cfg.config_hash(exclude=("seeds", "output_dir", "mode", "task_order"))


def experiment_dir(cfg: ExperimentConfig, root: str | Path | None = None) -> Path:
    root = Path(root or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)
    return root / f"{cfg.suite}-{suite_hash(cfg)}"


def _csv_text(columns, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return out.getvalue()


def _parse_seeds(text: str) -> list[int]:
    text = text.strip()
    try:
        if "," not in text:
            n = int(text)
            if n < 1:
                raise ValueError
            return list(range(n))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: expected a count or a comma-separated list, got {text!r}") from None


def _parse_overrides(extra: list[str], sets: list[str]) -> dict[str, str]:
    """``--section.key value`` / ``--section.key=value`` pairs plus ``--set key=value``."""
    out: dict[str, str] = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out[key] = val
    return out


# ---------------------------------------------------------------------------
# run


def _run_one(flat: dict, mode: str, seed: int, task: str | None, run_dir: str, force: bool) -> dict:
    """Worker body (module-level so process pools can pickle it)."""
    from . import trainer

    cfg = from_flat(flat)
    run_dir = Path(run_dir)
    rec_path = run_dir / "record.json"
    run_hash = (cfg.replace(task_order=[task]) if task else cfg).config_hash()
    if not force and rec_path.exists():
        prev = json.loads(rec_path.read_text())
        if prev.get("complete") and prev.get("config_hash") == run_hash:
            return {"seed": seed, "task": task, "run_dir": str(run_dir), "status": "cached"}
    ckpt = run_dir / "checkpoint.rec"
    if not force and ckpt.exists() and mode != "random":
        st = trainer.load_checkpoint(ckpt)
        if st.cfg.config_hash() == run_hash:
            trainer.resume(ckpt, run_dir)
            return {"seed": seed, "task": task, "run_dir": str(run_dir), "status": "resumed"}
    if mode == "wmar":
        trainer.run_continual(cfg, seed, run_dir)
    elif mode == "fifo_only":
        trainer.run_ablation_fifo_only(cfg, seed, run_dir)
    elif mode == "single_task":
        trainer.run_single_task(cfg, task, seed, run_dir)
    elif mode == "random":
        trainer.run_random(cfg, seed, run_dir)
        summary = {"mode": mode, "seed": seed, "config_hash": run_hash, "complete": True}
        atomic_write_text(rec_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"seed": seed, "task": task, "run_dir": str(run_dir), "status": "ran"}


def _jobs_for(cfg: ExperimentConfig, mode_dir: Path) -> list[tuple[int, str | None, Path]]:
    jobs = []
    for seed in cfg.seeds:
        if cfg.mode == "single_task":
            for task in cfg.task_labels():
                jobs.append((seed, task, mode_dir / task / f"seed{seed}"))
        else:
            jobs.append((seed, None, mode_dir / f"seed{seed}"))
    return jobs


def cmd_run(args) -> int:
    overrides = _parse_overrides(args.overrides, args.set)
    if args.mode:
        overrides["mode"] = args.mode
    if args.seeds:
        overrides["seeds"] = ",".join(str(s) for s in _parse_seeds(args.seeds))
    cfg = load_config(args.config, overrides)
    mode_dir = experiment_dir(cfg, args.out) / cfg.mode
    mode_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "mode": cfg.mode,
        "suite": cfg.suite,
        "tasks": cfg.task_labels(),
        "seeds": cfg.seeds,
        "config_hash": cfg.config_hash(),
        "suite_hash": suite_hash(cfg),
        "N": cfg.budget.N,
        "code_version": __version__,
        "config_path": str(args.config),
        "overrides": overrides,
    }
    atomic_write_text(mode_dir / "config.cfg", cfg.to_text())
    atomic_write_text(mode_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    jobs = _jobs_for(cfg, mode_dir)
    flat = cfg.to_flat()
    results = []
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futs = [pool.submit(_run_one, flat, cfg.mode, s, t, str(d), args.force) for s, t, d in jobs]
            results = [f.result() for f in futs]
    else:
        results = [_run_one(flat, cfg.mode, s, t, str(d), args.force) for s, t, d in jobs]
    for r in results:
        print(f"{r['status']:8s} seed={r['seed']}" + (f" task={r['task']}" if r["task"] else "") + f" {r['run_dir']}")

    rows = []
    for seed, task, d in jobs:
        with open(d / "metrics.csv", newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append((seed, int(r["global_step"]), r["task_trained"], r["eval_task"], r["episodic_reward"]))
    atomic_write_text(mode_dir / "aggregate.csv", _csv_text(("seed",) + EVAL_COLUMNS, rows))
    print(f"wrote {mode_dir / 'aggregate.csv'}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _manifest(d: Path, what: str) -> dict:
    p = d / "manifest.json"
    if not p.exists():
        raise UsageError(f"{what} run directory {d} has no manifest.json (is this a `wmar run` output?)")
    return json.loads(p.read_text())


def _seed_dirs(d: Path, seeds: list[int], what: str) -> list[Path]:
    out = []
    for s in seeds:
        sd = d / f"seed{s}"
        if not (sd / "metrics.csv").exists():
            raise UsageError(f"{what}: missing artifact {sd / 'metrics.csv'}")
        out.append(sd)
    return out


def _load_single(d: Path, man: dict, tasks: list[str]) -> list[dict[str, PerfCurve]]:
    """Per-seed dict task -> single-task curve."""
    per_seed: list[dict[str, PerfCurve]] = [dict() for _ in man["seeds"]]
    for t in tasks:
        if man["mode"] == "single_task":
            if t not in man["tasks"]:
                raise UsageError(f"single-task baseline {d} has no runs for task {t!r}")
            dirs = _seed_dirs(d / t, man["seeds"], f"single-task baseline for {t}")
            for i, sd in enumerate(dirs):
                per_seed[i][t] = read_eval_csv(sd / "metrics.csv")[t]
        else:
            for i, sd in enumerate(_seed_dirs(d, man["seeds"], "single-task baseline")):
                curves = read_eval_csv(sd / "metrics.csv")
                if t not in curves:
                    raise UsageError(f"single-task baseline {sd} has no curve for task {t!r}")
                per_seed[i][t] = curves[t]
    return per_seed


def cmd_eval(args) -> int:
    cl_specs = []
    for spec in args.cl:
        name, _, path = spec.rpartition("=") if "=" in spec else ("", "", spec)
        cl_specs.append((name, Path(path)))
    if args.random is None:
        raise UsageError("missing random baseline: pass --random <random-mode run directory>")
    if args.single is None:
        raise UsageError("missing single-task baseline: pass --single <single_task-mode run directory>")
    single_dir, random_dir = Path(args.single), Path(args.random)
    man_single = _manifest(single_dir, "single-task baseline")
    man_random = _manifest(random_dir, "random baseline")
    cls = [(name or _manifest(p, "continual")["mode"], p, _manifest(p, "continual")) for name, p in cl_specs]

    ref = cls[0][2]
    for label, man in [(n, m) for n, _, m in cls] + [("single-task", man_single), ("random", man_random)]:
        if man["suite"] != ref["suite"]:
            raise UsageError(f"{label}: suite {man['suite']!r} does not match {ref['suite']!r}")
        if man["mode"] != "random" and man["N"] != ref["N"]:
            raise UsageError(f"{label}: budget N={man['N']} does not match N={ref['N']}")
        if man["suite_hash"] != ref["suite_hash"] and not args.force:
            raise UsageError(
                f"{label}: config hash {man['suite_hash']} differs from {ref['suite_hash']}; pass --force to compare anyway"
            )
    tasks, N = ref["tasks"], int(ref["N"])

    # random baseline: mean episodic reward per task, averaged over seeds
    rand: dict[str, list[float]] = {t: [] for t in tasks}
    for sd in _seed_dirs(random_dir, man_random["seeds"], "random baseline"):
        curves = read_eval_csv(sd / "metrics.csv")
        for t in tasks:
            if t not in curves:
                raise UsageError(f"random baseline {sd} has no episodes for task {t!r}")
            rand[t].append(float(curves[t].values.mean()))
    random_means = {t: float(np.mean(v)) for t, v in rand.items()}

    single = _load_single(single_dir, man_single, tasks)
    single_ref = {t: float(np.mean([s[t].at(N) for s in single])) for t in tasks}

    model_metrics, norm_rows, comp, notes = {}, [], [], []
    for name, path, man in cls:
        ms = []
        for i, sd in enumerate(_seed_dirs(path, man["seeds"], f"continual run {name}")):
            curves = read_eval_csv(sd / "metrics.csv")
            missing = [t for t in tasks if t not in curves]
            if missing:
                raise UsageError(f"{sd / 'metrics.csv'} lacks evaluations for {missing}")
            m = suite_metrics(tasks, curves, single[i % len(single)], random_means, N, single_ref)
            ms.append(m)
            notes.extend(f"{name} seed{man['seeds'][i]}: {n}" for n in m.notes)
            trained = _trained_by_step(sd / "metrics.csv")
            for t, q in m.q_curves.items():
                for step, v in zip(q.steps, q.values):
                    norm_rows.append((name, i, int(step), trained.get(int(step), ""), t, float(v)))
        model_metrics[name] = ms
        comp.extend(component_rows(name, ms))

    out = Path(args.out) if args.out else cls[0][1].parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    rows = table_rows(model_metrics)
    atomic_write_text(out / "table.csv", _csv_text(TABLE_COLUMNS, [tuple(r[c] for c in TABLE_COLUMNS) for r in rows]))
    comp_cols = ("model", "seed_index", "task", "forgetting", "fwd_transfer", "excluded")
    atomic_write_text(out / "components.csv", _csv_text(comp_cols, [tuple(r[c] for c in comp_cols) for r in comp]))
    atomic_write_text(out / "normalized.csv", _csv_text(NORMALIZED_COLUMNS, norm_rows))
    summary = {
        "suite": ref["suite"],
        "N": N,
        "tasks": tasks,
        "random_means": random_means,
        "single_reference": single_ref,
        "notes": notes,
        "per_seed": {
            name: [{"avg_forgetting": m.avg_forgetting, "avg_fwd_transfer": m.avg_fwd_transfer} for m in ms]
            for name, ms in model_metrics.items()
        },
    }
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for n in notes:
        print(f"note: {n}", file=sys.stderr)
    print(f"{'model':12s} {'forgetting (median [q25, q75])':36s} fwd transfer (median [q25, q75])")
    for r in rows:
        f = f"{r['avg_forgetting_median']:.3f} [{r['avg_forgetting_q25']:.3f}, {r['avg_forgetting_q75']:.3f}]"
        ft = f"{r['avg_fwd_transfer_median']:.3f} [{r['avg_fwd_transfer_q25']:.3f}, {r['avg_fwd_transfer_q75']:.3f}]"
        print(f"{r['model']:12s} {f:36s} {ft}")
    print(f"wrote {out}")
    return 0


def _trained_by_step(path: Path) -> dict[int, str]:
    with open(path, newline="") as fh:
        return {int(r["global_step"]): r["task_trained"] for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# chart


def read_normalized_csv(path: str | Path) -> dict[str, dict[str, dict[int, list[tuple[int, float, str]]]]]:
    """model -> eval_task -> seed_index -> [(step, value, task_trained)]."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != NORMALIZED_COLUMNS:
            raise UsageError(f"{path}: expected columns {NORMALIZED_COLUMNS}, got {reader.fieldnames}")
        for r in reader:
            try:
                rec = (int(r["global_step"]), float(r["normalized"]), r["task_trained"])
                seed = int(r["seed_index"])
            except (TypeError, ValueError):
                raise UsageError(f"{path}: malformed row {r}") from None
            if not math.isfinite(rec[1]):
                raise UsageError(f"{path}: non-finite value in row {r}")
            out.setdefault(r["model"], {}).setdefault(r["eval_task"], {}).setdefault(seed, []).append(rec)
    return out


def band_series(per_seed: dict[int, list[tuple[int, float, str]]]):
    """Steps plus median, q25, q75 across seeds (carry-forward alignment)."""
    curves = [PerfCurve.from_pairs(sorted((s, v) for s, v, _ in pts)) for pts in per_seed.values()]
    steps = sorted({int(s) for c in curves for s in c.steps})
    med, lo, hi = [], [], []
    for s in steps:
        vals = [c.at(s) for c in curves if c.steps[0] <= s]
        m, q25, q75 = quantiles(vals)
        med.append(m)
        lo.append(q25)
        hi.append(q75)
    return np.array(steps), np.array(med), np.array(lo), np.array(hi)


def cmd_chart(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = read_normalized_csv(args.csv)
    out = Path(args.out) if args.out else Path(args.csv).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.csv).stem
    written = []
    targets = data.items() if data else [("empty", {})]
    for model, tasks in targets:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        colours = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for i, (task, per_seed) in enumerate(sorted(tasks.items())):
            col = colours[i % len(colours)]
            steps, med, lo, hi = band_series(per_seed)
            ax.fill_between(steps, lo, hi, step="post", color=col, alpha=0.2, linewidth=0)
            ax.step(steps, med, where="post", color=col, linewidth=1.0, label=task)
            trained = {s: t for pts in per_seed.values() for s, _, t in pts}
            active = np.array([trained.get(int(s)) == task for s in steps])
            ax.step(steps, np.where(active, med, np.nan), where="post", color=col, linewidth=3.0)
        ax.set_xlabel("global environment step")
        ax.set_ylabel("normalised score")
        ax.set_title(f"{model}: median and interquartile band across seeds (bold: task being trained)")
        if tasks:
            ax.legend(loc="best", fontsize="small")
        buf = io.BytesIO()
        fig.savefig(buf, format="svg")
        plt.close(fig)
        path = out / f"{stem}_{model}.svg"
        atomic_write_bytes(path, buf.getvalue())
        written.append(path)
    for p in written:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------
# validate-config / grad-check


def cmd_validate(args) -> int:
    overrides = _parse_overrides(args.overrides, args.set)
    cfg = load_config(args.config, overrides)
    print(f"ok: suite={cfg.suite} mode={cfg.mode} tasks={','.join(cfg.task_labels())} config_hash={cfg.config_hash()}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import check_ops, check_world_model_loss

    ops = check_ops(args.trials, args.seed)
    worst: dict[str, float] = {}
    for r in ops:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_err)
    ok = all(r.passed for r in ops)
    for name, err in sorted(worst.items()):
        print(f"{'PASS' if err < ops[0].tol else 'FAIL'} {name:22s} max rel err {err:.2e}")
    wm = check_world_model_loss(args.seed)
    print(f"{'PASS' if wm.passed else 'FAIL'} {wm.name:22s} max rel err {wm.max_rel_err:.2e}")
    ok = ok and wm.passed
    print(f"{len(ops)} op checks over {args.trials} trials: {'all passed' if ok else 'FAILURES'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmar", description="World models with augmented replay: continual RL harness.")
    p.add_argument("--version", action="version", version=f"wmar {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one mode over the configured seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--seeds", help="seed count N (seeds 0..N-1) or a comma-separated list")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.add_argument("--out", help=f"output root (default: ${OUTPUT_ROOT_ENV} or the config's output_dir)")
    r.add_argument("--force", action="store_true", help="rerun even if finished results exist")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="normalise runs and compute forgetting / forward transfer")
    e.add_argument("--cl", action="append", required=True, metavar="[NAME=]DIR", help="continual run directory")
    e.add_argument("--single", help="single_task run directory")
    e.add_argument("--random", help="random run directory")
    e.add_argument("--out")
    e.add_argument("--force", action="store_true", help="accept mismatched config hashes")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("chart", help="SVG learning curves from an eval normalized.csv")
    c.add_argument("csv")
    c.add_argument("--out")
    c.set_defaults(func=cmd_chart)

    v = sub.add_parser("validate-config", help="parse and validate a config file")
    v.add_argument("config")
    v.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    v.set_defaults(func=cmd_validate)

    g = sub.add_parser("grad-check", help="finite-difference checks of every differentiable op")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command not in ("run", "validate-config"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    args.overrides = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure; crash checkpoints are written by the trainer
        from .trainer import TrainingCrash

        if isinstance(e, TrainingCrash):
            print(f"run failed: {e} (crash checkpoint: {e.checkpoint})", file=sys.stderr)
        else:
            print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
