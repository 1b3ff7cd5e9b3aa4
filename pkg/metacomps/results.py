"""
Run records, their CSV form, and the per-task curves aggregated over seeds.
"""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import LearnerKind

logger = logging.getLogger(__name__)

CSV_HEADER = ["learner", "seed", "task_index", "episode", "mean_return", "success_rate", "solved_at"]
METRICS = ("episodes_to_success", "mean_return")


@dataclass(frozen=True)
class RunRecord:
    learner: LearnerKind
    seed: int
    task_index: int
    episode: int
    mean_return: float
    success_rate: float
    solved_at: Optional[int]


@dataclass
class Curve:
    """Per-task mean over seeds and its standard error."""
    task_indices: List[int]
    mean: np.ndarray
    se: np.ndarray
    n_seeds: List[int]


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_csv(records: Iterable[RunRecord], path: Path) -> int:
    """Write records with LF line endings and 9 significant digits; returns the row count."""
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([
                LearnerKind(r.learner).value, r.seed, r.task_index, r.episode,
                _fmt(r.mean_return), _fmt(r.success_rate),
                "" if r.solved_at is None else r.solved_at,
            ])
            count += 1
    logger.debug(f"Wrote {count} records to {path}")
    return count


def read_csv(path: Path) -> List[RunRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"Unexpected CSV header in {path}: {reader.fieldnames}")
        return [
            RunRecord(
                LearnerKind(row["learner"]), int(row["seed"]), int(row["task_index"]), int(row["episode"]),
                float(row["mean_return"]), float(row["success_rate"]),
                int(row["solved_at"]) if row["solved_at"] else None,
            )
            for row in reader
        ]


def merge_csv(parts: Sequence[Path], path: Path) -> int:
    """Concatenate per-seed CSV files, in the given order, into one."""
    records: List[RunRecord] = []
    for part in parts:
        records.extend(read_csv(part))
    return write_csv(records, path)


BACKWARD_HEADER = ["learner", "seed", "task_index", "k", "normalized_reward"]

BackwardSeries = Dict[int, Dict[int, Optional[float]]]


def write_backward_csv(series: Mapping[Tuple[str, int], BackwardSeries], path: Path) -> int:
    """One row per (learner, seed, task, k); an empty cell marks a missing value."""
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(BACKWARD_HEADER)
        for (learner, seed), by_task in series.items():
            for task_index, values in sorted(by_task.items()):
                for k, v in sorted(values.items()):
                    writer.writerow([learner, seed, task_index, k, "" if v is None else _fmt(v)])
                    count += 1
    logger.debug(f"Wrote {count} backward-transfer rows to {path}")
    return count


def group_by_learner(records: Iterable[RunRecord]) -> "OrderedDict[LearnerKind, List[RunRecord]]":
    groups: "OrderedDict[LearnerKind, List[RunRecord]]" = OrderedDict()
    for r in records:
        groups.setdefault(LearnerKind(r.learner), []).append(r)
    return groups


def _aggregate(per_seed: Dict[int, Dict[int, float]]) -> Curve:
    tasks = sorted(per_seed)
    means, ses, counts = [], [], []
    for task in tasks:
        vals = np.array([per_seed[task][s] for s in sorted(per_seed[task])], dtype=np.float64)
        means.append(float(np.mean(vals)))
        ses.append(float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0)
        counts.append(int(vals.size))
    return Curve(tasks, np.array(means), np.array(ses), counts)


def episodes_to_success_curve(records: Iterable[RunRecord], n_cap: int) -> Curve:
    """
    Mean episodes-to-success M per task index over seeds; a task a seed
    never solved counts as n_cap.
    """
    per_seed: Dict[int, Dict[int, float]] = {}
    for r in records:
        m = r.solved_at if r.solved_at is not None else n_cap
        per_seed.setdefault(r.task_index, {})[r.seed] = float(m)
    return _aggregate(per_seed)


def mean_return_curve(records: Iterable[RunRecord]) -> Curve:
    """Per task index: the average episode return within the task, averaged over seeds."""
    sums: Dict[Tuple[int, int], List[float]] = {}
    for r in records:
        sums.setdefault((r.task_index, r.seed), []).append(r.mean_return)
    per_seed: Dict[int, Dict[int, float]] = {}
    for (task, seed), returns in sums.items():
        per_seed.setdefault(task, {})[seed] = float(np.mean(returns))
    return _aggregate(per_seed)


def curve_for(metric: str, records: Sequence[RunRecord], n_cap: Optional[int] = None) -> Curve:
    if metric == "episodes_to_success":
        if n_cap is None:
            # Without an explicit cap, fall back to the longest task seen.
            n_cap = max(r.episode for r in records)
        return episodes_to_success_curve(records, n_cap)
    if metric == "mean_return":
        return mean_return_curve(records)
    raise ValueError(f"Unknown metric {metric!r}; expected one of {', '.join(METRICS)}")


def window_mean(curve: Curve, first: int, last: int) -> float:
    """Mean of the curve over task indices first..last inclusive."""
    picks = [m for t, m in zip(curve.task_indices, curve.mean) if first <= t <= last]
    if not picks:
        raise ValueError(f"No tasks in window [{first}, {last}]")
    return float(np.mean(picks))
