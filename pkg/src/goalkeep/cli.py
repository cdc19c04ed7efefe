"""Command-line entry point.

Verbs:
    goalkeep run <config.yaml>        execute an experiment config
    goalkeep plot <records-dir>       render figures for finished runs
    goalkeep inspect-buffer <ckpt>    summarize replay buffers in a checkpoint
    goalkeep validate-config <path>   parse and check a config, print its hash

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
The ``GOALKEEP_OUT`` environment variable overrides the output root for
``run``; an explicit ``--out`` flag overrides both.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .buffers import composition
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .errors import ConfigurationError, GoalkeepError, InputError
from .experiment import run_experiment
from .plots import PLOT_KINDS, emit_plots

OUT_ENV_VAR = "GOALKEEP_OUT"


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage errors via exit code 1."""

    def error(self, message):
        raise _ArgumentError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="goalkeep",
                     description="streaming goal forecasting experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to a YAML experiment config")
    p_run.add_argument("--out", default=None,
                       help="output root (overrides config and environment)")
    p_run.set_defaults(func=_cmd_run)

    p_plot = sub.add_parser("plot", help="render figures for a finished run")
    p_plot.add_argument("records_dir",
                        help="experiment directory containing runs/")
    p_plot.add_argument("--kinds", nargs="*", default=None,
                        help=f"plot kinds (default: all of {', '.join(PLOT_KINDS)})")
    p_plot.set_defaults(func=_cmd_plot)

    p_ins = sub.add_parser("inspect-buffer",
                           help="summarize the replay buffers in a checkpoint")
    p_ins.add_argument("checkpoint", help="path to a checkpoint JSON file")
    p_ins.set_defaults(func=_cmd_inspect)

    p_val = sub.add_parser("validate-config",
                           help="check a config file and print its hash")
    p_val.add_argument("config", help="path to a YAML experiment config")
    p_val.set_defaults(func=_cmd_validate)
    return parser


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_yaml(args.config)
    out = args.out or os.environ.get(OUT_ENV_VAR) or config.out_dir
    expected = len(config.trainers) * len(config.seeds)
    print(f"experiment {config.config_hash()}: {expected} runs -> {out}")
    records = run_experiment(config, out_root=out)
    for rec in records:
        final = rec.rows[-1]
        print(f"  {rec.run_id}: fde_ave={final['fde_ave']:.4f} "
              f"mr_ave={final['mr_ave']:.4f} processed={rec.processed} "
              f"({rec.wall_time:.1f}s)")
    if len(records) < expected:
        print(f"{expected - len(records)} run(s) failed", file=sys.stderr)
        return 2
    return 0


def _cmd_plot(args) -> int:
    written = emit_plots(args.records_dir, kinds=args.kinds)
    for path in written:
        print(path)
    print(f"{len(written)} file(s) written")
    return 0


def _cmd_inspect(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    print(f"trainer: {trainer.kind} (seed {trainer.seed}, "
          f"step {trainer.step_count})")
    for name, buf in (("reservoir", trainer.reservoir),
                      ("diversity", trainer.diversity)):
        print(f"{name}: {len(buf)}/{buf.capacity} entries, "
              f"{buf.n_seen} offered")
        comp = composition(buf)
        if comp:
            parts = ", ".join(f"task {t}: {c}" for t, c in sorted(comp.items()))
            print(f"  composition: {parts}")
    scores = np.asarray(trainer.diversity.scores, dtype=float)
    if scores.size:
        print(f"diversity scores: mean={scores.mean():.4f} "
              f"min={scores.min():.4f} max={scores.max():.4f}")
    return 0


def _cmd_validate(args) -> int:
    config = ExperimentConfig.from_yaml(args.config)
    print(f"config ok: hash={config.config_hash()}, "
          f"{len(config.trainers)} trainer(s) x {len(config.seeds)} seed(s)")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigurationError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (GoalkeepError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
