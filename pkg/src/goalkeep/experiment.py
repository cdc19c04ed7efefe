"""Seeded multi-run orchestration and CSV reporting.

One experiment = a config, a set of trainer kinds, and a set of seeds.
Every (kind, seed) pair is an isolated run writing its own files under
``<out>/<config-hash>/runs/<kind>-seed<seed>/``; a summary with mean and
standard deviation across seeds lands next to them. All numeric output is
written with shortest round-trip float formatting, so identical configs
produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .errors import GoalkeepError
from .metrics import averages, bwt
from .stream import task_boundaries
from .trainer import RunResult, run_stream

METRIC_COLUMNS = ("run_id", "seed", "trainer", "buffer_total", "task",
                  "fde", "mr", "fde_bwt", "mr_bwt", "fde_ave", "mr_ave")
SUMMARY_METRICS = ("fde_ave", "mr_ave", "fde_bwt", "mr_bwt")


@dataclass(frozen=True)
class RunRecord:
    """What one completed run left behind."""

    run_id: str
    config_hash: str
    kind: str
    seed: int
    buffer_total: int
    rows: tuple[dict, ...]       # one metrics row per completed task
    run_dir: str
    wall_time: float
    processed: int


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _metric_rows(result: RunResult, run_id: str, buffer_total: int) -> list[dict]:
    n = result.fde_matrix.n_tasks
    rows = []
    for t in range(n):
        c = t + 1
        rows.append({
            "run_id": run_id, "seed": result.seed, "trainer": result.kind,
            "buffer_total": buffer_total, "task": t,
            "fde": float(result.fde_matrix.values[t, t]),
            "mr": float(result.mr_matrix.values[t, t]),
            "fde_bwt": bwt(result.fde_matrix, c) if c >= 2 else None,
            "mr_bwt": bwt(result.mr_matrix, c) if c >= 2 else None,
            "fde_ave": averages(result.fde_matrix, c),
            "mr_ave": averages(result.mr_matrix, c),
        })
    return rows


def _write_run_files(result: RunResult, run_dir: Path, rows: list[dict],
                     boundaries: list[int], save_ckpt: bool) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(run_dir / "metrics.csv", METRIC_COLUMNS,
               [[r[c] for c in METRIC_COLUMNS] for r in rows])
    n = result.fde_matrix.n_tasks
    task_cols = [f"task_{j}" for j in range(n)]
    _write_csv(run_dir / "matrix_fde.csv", task_cols,
               [list(map(float, row)) for row in result.fde_matrix.values])
    _write_csv(run_dir / "matrix_mr.csv", task_cols,
               [list(map(float, row)) for row in result.mr_matrix.values])
    _write_csv(run_dir / "trace.csv",
               ("step", "loss", "stream_focal", "replay_kl_r", "replay_focal_r",
                "replay_kl_d", "replay_focal_d", "triggered_fast",
                "triggered_slow", "processed"),
               [(i.step, i.loss, i.stream_focal, i.replay_kl_r, i.replay_focal_r,
                 i.replay_kl_d, i.replay_focal_d, i.triggered_fast,
                 i.triggered_slow, i.processed) for i in result.trace])
    comp_rows = []
    for rec in result.compositions:
        for buf_name in ("reservoir", "diversity"):
            counts = rec[buf_name]
            comp_rows.append([rec["step"], buf_name]
                             + [counts.get(j, 0) for j in range(n)])
    _write_csv(run_dir / "compositions.csv",
               ["step", "buffer"] + task_cols, comp_rows)
    _write_csv(run_dir / "boundaries.csv", ("task", "end_step"),
               list(enumerate(boundaries)))
    if save_ckpt:
        save_checkpoint(result.trainer, str(run_dir / "checkpoint.json"))


def _execute_run(cfg_dict: dict, kind: str, seed: int, exp_dir: str) -> RunRecord:
    """Run one (kind, seed) pair and write its files; safe to call in a worker."""
    config = ExperimentConfig.from_dict(cfg_dict)
    stream = config.stream.build()
    result = run_stream(kind, stream, config.hyper, seed,
                        total_budget=config.buffer_total,
                        reservoir_fraction=config.reservoir_fraction,
                        predictor_config=config.predictor,
                        goals_k=config.goals_k, eval_role=config.eval_role,
                        composition_every=config.composition_every,
                        score_batch=config.score_batch)
    config_hash = config.config_hash()
    run_id = f"{config_hash}-{kind}-seed{seed}"
    run_dir = Path(exp_dir) / "runs" / f"{kind}-seed{seed}"
    rows = _metric_rows(result, run_id, config.buffer_total)
    boundaries = task_boundaries(stream, config.hyper.batch_size)
    _write_run_files(result, run_dir, rows, boundaries, config.save_checkpoints)
    return RunRecord(run_id=run_id, config_hash=config_hash, kind=kind,
                     seed=seed, buffer_total=config.buffer_total,
                     rows=tuple(rows), run_dir=str(run_dir),
                     wall_time=result.wall_time, processed=result.processed)


def _write_summary(path: Path, config: ExperimentConfig,
                   records: list[RunRecord]) -> None:
    rows = []
    for kind in config.trainers:
        finals = [rec.rows[-1] for rec in records if rec.kind == kind]
        if not finals:
            continue
        for metric in SUMMARY_METRICS:
            vals = np.array([f[metric] for f in finals if f[metric] is not None])
            if vals.size == 0:
                continue
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            rows.append([kind, metric, len(vals), float(vals.mean()), std])
    _write_csv(path, ("trainer", "metric", "n_seeds", "mean", "std"), rows)


def run_experiment(config: ExperimentConfig,
                   out_root: str | None = None) -> list[RunRecord]:
    """Execute every (trainer, seed) pair and write all result files.

    Runs are isolated: a failing run is reported on stderr and skipped,
    the rest proceed. Records are returned in (trainer, seed) config
    order. With ``workers > 1`` runs execute on a process pool; results
    are identical either way because every run is independently seeded.
    """
    out = Path(out_root if out_root is not None else config.out_dir)
    exp_dir = out / config.config_hash()
    exp_dir.mkdir(parents=True, exist_ok=True)
    config.to_yaml(str(exp_dir / "config.yaml"))
    jobs = [(kind, seed) for kind in config.trainers for seed in config.seeds]
    cfg_dict = config.to_dict()
    records: list[RunRecord] = []
    failures: list[str] = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {(kind, seed): pool.submit(_execute_run, cfg_dict, kind,
                                                 seed, str(exp_dir))
                       for kind, seed in jobs}
            for (kind, seed), fut in futures.items():
                try:
                    records.append(fut.result())
                except Exception as e:   # noqa: BLE001 - isolate runs
                    failures.append(f"{kind}-seed{seed}: {e}")
    else:
        for kind, seed in jobs:
            try:
                records.append(_execute_run(cfg_dict, kind, seed, str(exp_dir)))
            except GoalkeepError as e:
                failures.append(f"{kind}-seed{seed}: {e}")
    for line in failures:
        print(f"run failed: {line}", file=sys.stderr)
    _write_summary(exp_dir / "summary.csv", config, records)
    return records
