from __future__ import annotations

import argparse
import dataclasses
import logging
from pathlib import Path
from typing import List

from .config import ExperimentConfig, LearnerKind, load_config, serialize_config
from .envs import SequenceMode, TaskFamily, make_sequence, sequence_to_manifest
from .errors import ConfigError, NumericalAbort, ProtocolViolation
from .logger import setup_logging

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PROTOCOL = 2
EXIT_NUMERICAL = 3


def _parse_list(text: str, kind, key: str) -> tuple:
    try:
        return tuple(kind(part.strip()) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key}={text!r} is invalid; allowed: comma-separated list") from None


def _effective_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seeds:
        overrides["seeds"] = _parse_list(args.seeds, int, "--seeds")
    if args.learners:
        allowed = " | ".join(k.value for k in LearnerKind)
        try:
            overrides["learners"] = _parse_list(args.learners, LearnerKind, "--learners")
        except ValueError:
            raise ConfigError(f"--learners={args.learners!r} is invalid; allowed: {allowed}") from None
    if args.out:
        overrides["output_dir"] = args.out
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def cli_run(args: argparse.Namespace) -> int:
    """Run every configured learner over the task sequence for every seed."""
    from .driver import run_experiment

    cfg = _effective_config(args)
    logging.info(f"Starting run: family={cfg.family.value}, mode={cfg.mode.value}, tasks={cfg.n_tasks}, "
                 f"learners={[k.value for k in cfg.learners]}, seeds={list(cfg.seeds)}")
    logging.debug(f"Effective config:\n{serialize_config(cfg)}")

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")

    result = run_experiment(cfg, out, workers=args.workers)
    print(f"Records: {result.records_path} ({len(result.records)} rows)")
    for (learner, seed), values in sorted(result.backward.items()):
        cells = ", ".join(f"k={k}: {'missing' if v is None else f'{v:.3f}'}" for k, v in sorted(values.items()))
        print(f"Backward transfer {learner} seed {seed}: {cells}")
    return EXIT_OK


def cli_plot(args: argparse.Namespace) -> int:
    """Render a per-task curve chart from a records CSV."""
    from .render import render_curves
    from .results import read_csv

    records = read_csv(Path(args.csv))
    logging.info(f"Loaded {len(records)} records from {args.csv}")
    render_curves(records, args.metric, Path(args.out), n_cap=args.n_cap)
    print(f"Chart: {args.out}")
    return EXIT_OK


def cli_sequences(args: argparse.Namespace) -> int:
    """Print a task manifest."""
    tasks = make_sequence(TaskFamily(args.family), SequenceMode(args.mode), args.n, rng=args.seed)
    print(sequence_to_manifest(tasks, SequenceMode(args.mode)), end="")
    return EXIT_OK


def cli_inspect(args: argparse.Namespace) -> int:
    """Diagnose a chart file and show its series."""
    from .render import diagnose_chart

    print(diagnose_chart(Path(args.svg_file)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comps", description="Continual meta-policy search on desk-scale task sequences")
    sub = p.add_subparsers(dest="cmd")

    r = sub.add_parser("run", help="Run the continual protocol for the configured learners and seeds")
    r.add_argument("--config", help="Sectioned key=value config file (defaults when omitted)")
    r.add_argument("--seeds", help="Comma-separated seeds, overrides experiment.seeds")
    r.add_argument("--learners", help="Comma-separated learners: comps, ppotl, novtrace")
    r.add_argument("--out", help="Output directory, overrides experiment.output_dir")
    r.add_argument("--workers", type=int, default=1, help="Parallel worker processes for seeds (default: 1)")
    r.set_defaults(func=cli_run)

    pl = sub.add_parser("plot", help="Render an SVG chart from a records CSV")
    pl.add_argument("--csv", required=True, help="Records CSV written by `run`")
    pl.add_argument("--metric", choices=["episodes_to_success", "mean_return"], default="episodes_to_success")
    pl.add_argument("--out", required=True, help="Output SVG path")
    pl.add_argument("--n-cap", type=int, help="Episodes imputed for unsolved tasks (default: longest task seen)")
    pl.set_defaults(func=cli_plot)

    s = sub.add_parser("sequences", help="Print the task manifest of a sequence")
    s.add_argument("--family", choices=[f.value for f in TaskFamily], required=True)
    s.add_argument("--mode", choices=[m.value for m in SequenceMode], required=True)
    s.add_argument("--n", type=int, required=True, help="Number of tasks")
    s.add_argument("--seed", type=int, default=0, help="Shuffle seed for stationary sequences (default: 0)")
    s.set_defaults(func=cli_sequences)

    i = sub.add_parser("inspect", help="Diagnose a rendered chart and list its series")
    i.add_argument("svg_file", help="SVG chart to inspect")
    i.set_defaults(func=cli_inspect)

    return p


def main(argv: List[str] | None = None) -> int:
    # Setup logging first
    setup_logging()

    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_CONFIG

    try:
        result = args.func(args)
        logging.info(f"Operation completed with exit code: {result}")
        return result
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        print(f"Configuration error: {e}")
        return EXIT_CONFIG
    except ProtocolViolation as e:
        logging.error(f"Protocol violation: {e}", exc_info=True)
        print(f"Protocol violation: {e}")
        return EXIT_PROTOCOL
    except NumericalAbort as e:
        logging.error(f"Numerical abort: {e}", exc_info=True)
        print(f"Numerical abort: {e}")
        return EXIT_NUMERICAL
    except Exception as e:
        logging.error(f"Unhandled exception: {e}", exc_info=True)
        print(f"Fatal error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
