"""
Logging utilities for continual meta-policy search runs.

Sets up the debug log, emits the per-task and per-meta-round INFO lines,
and writes the human-readable run report next to the CSV output.
"""

from __future__ import annotations

import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

from .results import BackwardSeries, Curve

DEBUG_LOG = "comps_debug.log"


def setup_logging(log_file: Optional[str] = DEBUG_LOG, console_level: int = logging.INFO) -> None:
    """Setup logging to both file and console."""
    logger = logging.getLogger()
    logger.setLevel(logging.DEBUG)

    # Clear existing handlers
    logger.handlers.clear()

    if log_file:
        file_handler = logging.FileHandler(log_file, mode='w')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(
            logging.Formatter('%(asctime)s - %(levelname)s - %(module)s:%(lineno)d - %(message)s')
        )
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(console_level)
    console_handler.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))
    logger.addHandler(console_handler)

    logging.info(f"Logging initialized. Debug log: {log_file}")


def log_task_outcome(learner: str, seed: int, task_index: int, episodes_used: int,
                     solved_at: Optional[int], skipped_steps: int) -> None:
    status = f"solved at episode {solved_at}" if solved_at is not None else "unsolved"
    logging.getLogger(__name__).info(
        f"[{learner} seed={seed}] task {task_index}: {status}, "
        f"{episodes_used} episodes, {skipped_steps} skipped PPO steps"
    )


def log_meta_diagnostics(learner: str, seed: int, task_index: int, diagnostics: Sequence) -> None:
    """One INFO line per meta-training round: first and last BC loss, inner gradient norm."""
    log = logging.getLogger(__name__)
    if not diagnostics:
        log.info(f"[{learner} seed={seed}] meta after task {task_index}: no iterations")
        return
    first, last = diagnostics[0], diagnostics[-1]
    log.info(
        f"[{learner} seed={seed}] meta after task {task_index}: {len(diagnostics)} iterations, "
        f"BC loss {first.mean_bc_loss:.4f} -> {last.mean_bc_loss:.4f}, "
        f"inner grad norm {last.mean_inner_grad_norm:.4f}"
    )


def _fmt_optional(x: Optional[float]) -> str:
    return "missing" if x is None else f"{x:.4f}"


def log_run_summary(log_path: Path, config_text: str, started: datetime, elapsed: float,
                    curves: Mapping[str, Curve], backward: Mapping[Tuple[str, int], Dict[int, Optional[float]]],
                    records_path: Optional[Path] = None, error: Optional[str] = None,
                    backward_series: Optional[Mapping[Tuple[str, int], BackwardSeries]] = None) -> None:
    """
    Write the run report.

    Args:
        log_path: Report file to (over)write
        config_text: Serialized configuration used for the run
        started: Run start time
        elapsed: Wall-clock seconds
        curves: Episodes-to-success curve per learner name
        backward: Normalized backward-transfer values per (learner, seed), keyed by k
        records_path: Merged CSV location
        error: Error message if the run failed
        backward_series: Backward transfer after every task, per (learner, seed)
    """
    lines = [
        "Continual Meta-Policy Search - Run Report",
        "=" * 50,
        "",
        "Run Information:",
        f"    Started: {started.strftime('%Y-%m-%d %H:%M:%S')}",
        f"    Finished: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
        f"    Elapsed: {elapsed:.2f} seconds",
        f"    Status: {'ERROR' if error else 'SUCCESS'}",
        f"    Records: {records_path if records_path else '-'}",
        "",
    ]
    if error:
        lines += ["Error Information:", f"    Error: {error}", ""]

    lines.append("Episodes To Success (mean +/- SE over seeds):")
    for name, curve in curves.items():
        cells = ", ".join(f"{m:.1f}+/-{s:.1f}" for m, s in zip(curve.mean, curve.se))
        lines.append(f"    {name}: {cells}")
    lines.append("")

    lines.append("Backward Transfer (normalized reward):")
    for (learner, seed), values in sorted(backward.items()):
        cells = ", ".join(f"k={k}: {_fmt_optional(v)}" for k, v in sorted(values.items()))
        lines.append(f"    {learner} seed {seed}: {cells}")
    lines.append("")

    if backward_series:
        lines.append("Backward Transfer After Each Task:")
        for (learner, seed), by_task in sorted(backward_series.items()):
            for task_index, values in sorted(by_task.items()):
                cells = ", ".join(f"k={k}: {_fmt_optional(v)}" for k, v in sorted(values.items()))
                lines.append(f"    {learner} seed {seed} task {task_index}: {cells}")
        lines.append("")

    lines.append("Configuration:")
    lines += [f"    {line}" for line in config_text.splitlines() if line]
    lines.append("")

    try:
        with open(log_path, 'w', encoding='utf-8') as f:
            f.write("\n".join(lines))
        logging.info(f"Run report written to: {log_path}")
    except Exception as e:
        logging.error(f"Failed to write run report: {e}")
