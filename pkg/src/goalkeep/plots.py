"""Figure generation for finished experiment directories.

Each plot is an SVG with a sibling CSV holding exactly the numbers drawn,
so figures can be audited and regenerated without rerunning anything.
Everything renders through the Agg backend; no display is needed.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first
import numpy as np  # noqa: E402

PLOT_KINDS = ("task-curves", "error-matrix", "composition", "loss-trace")


def _warn(msg: str) -> None:
    print(f"plots: {msg}", file=sys.stderr)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _run_dirs(exp_dir: Path) -> list[Path]:
    root = exp_dir / "runs"
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if (p / "metrics.csv").is_file())


def _load_metrics(exp_dir: Path) -> list[dict]:
    rows: list[dict] = []
    for run_dir in _run_dirs(exp_dir):
        header, body = _read_csv(run_dir / "metrics.csv")
        for raw in body:
            rows.append(dict(zip(header, raw)))
    return rows


def _plot_task_curves(exp_dir: Path, plots_dir: Path) -> list[Path]:
    rows = _load_metrics(exp_dir)
    if not rows:
        return []
    written: list[Path] = []
    trainers = sorted({r["trainer"] for r in rows})
    for metric, label in (("fde_ave", "mean final displacement (m)"),
                          ("mr_ave", "mean miss rate")):
        data = []
        for kind in trainers:
            tasks = sorted({int(r["task"]) for r in rows if r["trainer"] == kind})
            for t in tasks:
                vals = np.array([float(r[metric]) for r in rows
                                 if r["trainer"] == kind and int(r["task"]) == t
                                 and r[metric] != ""])
                if vals.size == 0:
                    continue
                std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                data.append((kind, t, float(vals.mean()), std))
        csv_path = plots_dir / f"task_curves_{metric}.csv"
        _write_csv(csv_path, ("trainer", "task", "mean", "std"),
                   [(k, t, repr(m), repr(s)) for k, t, m, s in data])
        fig, ax = plt.subplots(figsize=(6, 4))
        for kind in trainers:
            pts = [(t, m, s) for k, t, m, s in data if k == kind]
            if not pts:
                continue
            ts, means, stds = zip(*pts)
            ax.errorbar(ts, means, yerr=stds, marker="o", capsize=3, label=kind)
        ax.set_xlabel("tasks seen")
        ax.set_ylabel(label)
        ax.set_title(f"average {metric.split('_')[0].upper()} after each task")
        ax.legend()
        fig.tight_layout()
        svg_path = plots_dir / f"task_curves_{metric}.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        written.extend([svg_path, csv_path])
    return written


def _plot_error_matrix(exp_dir: Path, plots_dir: Path) -> list[Path]:
    written: list[Path] = []
    for run_dir in _run_dirs(exp_dir):
        src = run_dir / "matrix_fde.csv"
        if not src.is_file():
            continue
        header, body = _read_csv(src)
        values = np.array([[float(v) for v in row] for row in body])
        name = run_dir.name
        csv_path = plots_dir / f"error_matrix_{name}.csv"
        _write_csv(csv_path, header, [[repr(float(v)) for v in row]
                                      for row in values])
        fig, ax = plt.subplots(figsize=(5, 4.5))
        masked = np.ma.masked_invalid(values)
        im = ax.imshow(masked, cmap="viridis")
        n = values.shape[0]
        for i in range(n):
            for j in range(n):
                if np.isfinite(values[i, j]):
                    ax.text(j, i, f"{values[i, j]:.2f}", ha="center",
                            va="center", color="white", fontsize=7)
        ax.set_xlabel("evaluated task")
        ax.set_ylabel("after training task")
        ax.set_title(f"FDE error matrix ({name})")
        fig.colorbar(im, ax=ax, label="FDE (m)")
        fig.tight_layout()
        svg_path = plots_dir / f"error_matrix_{name}.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        written.extend([svg_path, csv_path])
    return written


def _plot_composition(exp_dir: Path, plots_dir: Path) -> list[Path]:
    written: list[Path] = []
    for run_dir in _run_dirs(exp_dir):
        src = run_dir / "compositions.csv"
        if not src.is_file():
            continue
        header, body = _read_csv(src)
        if not body:
            continue
        task_cols = header[2:]
        name = run_dir.name
        csv_path = plots_dir / f"composition_{name}.csv"
        _write_csv(csv_path, header, body)
        fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
        for ax, buf in zip(axes, ("reservoir", "diversity")):
            rows = [r for r in body if r[1] == buf]
            if rows:
                steps = [int(r[0]) for r in rows]
                counts = np.array([[int(v) for v in r[2:]] for r in rows]).T
                ax.stackplot(steps, counts, labels=task_cols)
                ax.legend(fontsize=6, ncol=4, loc="upper left")
            ax.set_ylabel(f"{buf} entries")
        axes[-1].set_xlabel("step")
        axes[0].set_title(f"buffer composition over time ({name})")
        fig.tight_layout()
        svg_path = plots_dir / f"composition_{name}.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        written.extend([svg_path, csv_path])
    return written


def _plot_loss_trace(exp_dir: Path, plots_dir: Path) -> list[Path]:
    written: list[Path] = []
    for run_dir in _run_dirs(exp_dir):
        src = run_dir / "trace.csv"
        if not src.is_file():
            continue
        header, body = _read_csv(src)
        if not body:
            continue
        idx = {c: i for i, c in enumerate(header)}
        steps = [int(r[idx["step"]]) for r in body]
        losses = [float(r[idx["loss"]]) for r in body]
        name = run_dir.name
        csv_path = plots_dir / f"loss_trace_{name}.csv"
        _write_csv(csv_path, ("step", "loss"),
                   [(s, repr(v)) for s, v in zip(steps, losses)])
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(steps, losses, linewidth=0.8)
        bpath = run_dir / "boundaries.csv"
        if bpath.is_file():
            _, brows = _read_csv(bpath)
            for _, end in brows[:-1]:
                ax.axvline(int(end), color="grey", linestyle=":", linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        ax.set_title(f"loss trace ({name})")
        fig.tight_layout()
        svg_path = plots_dir / f"loss_trace_{name}.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        written.extend([svg_path, csv_path])
    return written


_PLOTTERS = {
    "task-curves": _plot_task_curves,
    "error-matrix": _plot_error_matrix,
    "composition": _plot_composition,
    "loss-trace": _plot_loss_trace,
}


def emit_plots(exp_dir: str, kinds=None) -> list[str]:
    """Render the requested plot kinds for one experiment directory.

    Unknown kinds are skipped with a warning; an experiment with no run
    output warns and produces nothing. Returns the paths written.
    """
    root = Path(exp_dir)
    requested = list(kinds) if kinds else list(PLOT_KINDS)
    if not _run_dirs(root):
        _warn(f"no runs found under {root}, nothing to plot")
        return []
    plots_dir = root / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    for kind in requested:
        plotter = _PLOTTERS.get(kind)
        if plotter is None:
            _warn(f"unknown plot kind {kind!r}, skipping "
                  f"(known: {', '.join(PLOT_KINDS)})")
            continue
        written.extend(str(p) for p in plotter(root, plots_dir))
    return written
