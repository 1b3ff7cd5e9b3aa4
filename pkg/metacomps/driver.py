"""
Continual protocol driver.

Tasks arrive one at a time. Each is trained with PPO from a learner-specific
starting point, finalized (never to be trained on again), and, for the
meta-learning variants, followed by a meta-training round over every task
seen so far.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .buffer import ExperienceStore, save_store
from .config import ExperimentConfig, LearnerKind, serialize_config
from .envs import TaskSpec, evaluate_policy, make_sequence, sequence_to_manifest
from .logger import log_meta_diagnostics, log_run_summary, log_task_outcome
from .meta import MetaDiagnostics, meta_init_for_task, meta_train
from .nn import GaussianPolicyHead, MlpSpec, ParamVector, init_params, init_policy, save_params, save_policy
from .ppo import run_rl
from .results import (
    BackwardSeries,
    RunRecord,
    episodes_to_success_curve,
    group_by_learner,
    merge_csv,
    write_backward_csv,
    write_csv,
)
from .vtrace import VtraceConfig, fit_value

logger = logging.getLogger(__name__)

# Purpose tags for the per-task random streams. A stream is keyed by
# (seed, task position, purpose), so learners consume identical randomness
# wherever their computations coincide.
STREAM_INIT = 0
STREAM_RL = 1
STREAM_FINALIZE = 2
STREAM_META = 3
STREAM_EVAL = 4


def task_rng(seed: int, task_position: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_position, purpose])


@dataclass
class ContinualResult:
    learner: LearnerKind
    seed: int
    records: List[RunRecord] = field(default_factory=list)
    task_policies: List[GaussianPolicyHead] = field(default_factory=list)
    theta_meta: Optional[GaussianPolicyHead] = None
    current_policy: Optional[GaussianPolicyHead] = None
    value: Optional[ParamVector] = None
    meta_diagnostics: Dict[int, List[MetaDiagnostics]] = field(default_factory=dict)
    environments: List[int] = field(default_factory=list)
    backward: Dict[int, Optional[float]] = field(default_factory=dict)
    backward_series: BackwardSeries = field(default_factory=dict)
    store: Optional[ExperienceStore] = None


def _vtrace_for(learner: LearnerKind, cfg: ExperimentConfig) -> VtraceConfig:
    vtrace_cfg = cfg.vtrace
    if vtrace_cfg.gamma is None:
        vtrace_cfg = dataclasses.replace(vtrace_cfg, gamma=cfg.discount)
    if learner == LearnerKind.COMPS_NO_VTRACE:
        return dataclasses.replace(vtrace_cfg, estimator="clipped_is")
    return vtrace_cfg



def _fresh_networks(task: TaskSpec, cfg: ExperimentConfig, seed: int) -> Tuple[GaussianPolicyHead, ParamVector]:
    rng = task_rng(seed, 0, STREAM_INIT)
    policy = init_policy(task.state_dim, task.action_dim, cfg.policy.hidden_dims, cfg.policy.init_std, rng)
    value = init_params(MlpSpec(task.state_dim, cfg.policy.value_hidden_dims, 1), rng)
    return policy, value


def normalized_reward(a: float, b: float, c: float) -> Optional[float]:
    """(c - a) / (b - a): 1 means nothing was forgotten, 0 means back to the first-episode level."""
    if b == a:
        return None
    return (c - a) / (b - a)


def backward_transfer(policy: GaussianPolicyHead, sequence: Sequence[TaskSpec], records: Sequence[RunRecord],
                      k: int, rng: np.random.Generator, n_eval: int = 10,
                      current: Optional[int] = None) -> Optional[float]:
    """
    Normalized reward of `policy` over the k tasks preceding task `current`
    (default: the last task of the sequence).

    a and b are the mean first- and last-episode returns those tasks reached
    while being trained; c is a fresh evaluation of the policy on them.
    Evaluation rollouts never enter any buffer. Returns None when no prior
    task exists or a == b.
    """
    current = len(sequence) - 1 if current is None else current
    prior = list(range(max(0, current - k), current))
    if not prior:
        return None
    by_task: Dict[int, List[RunRecord]] = {}
    for r in records:
        by_task.setdefault(r.task_index, []).append(r)
    firsts, lasts, evals = [], [], []
    for i in prior:
        rows = sorted(by_task.get(i, []), key=lambda r: r.episode)
        if not rows:
            logger.warning(f"No training records for task {i}; backward transfer k={k} unavailable")
            return None
        firsts.append(rows[0].mean_return)
        lasts.append(rows[-1].mean_return)
        evals.append(evaluate_policy(sequence[i], policy, n_eval, rng)[0])
    return normalized_reward(float(np.mean(firsts)), float(np.mean(lasts)), float(np.mean(evals)))


def _checkpoint(run_dir: Optional[Path], name: str, policy: GaussianPolicyHead,
                value: Optional[ParamVector] = None) -> None:
    if run_dir is None:
        return
    save_policy(policy, run_dir / f"{name}_policy.bin")
    if value is not None:
        save_params(value, run_dir / f"{name}_value.bin")


def run_continual(learner: LearnerKind, sequence: Sequence[TaskSpec], cfg: ExperimentConfig, seed: int,
                  output_dir: Optional[Path] = None) -> ContinualResult:
    """
    Run one learner over the task sequence with one seed.

    Starting point of task i: the fresh initialization for i == 0, otherwise
    the previous task's final policy (ppotl) or the latest meta solution
    (comps, novtrace). Any attempt to record experience for a finalized task
    raises ProtocolViolation and aborts the run.

    After every task the normalized backward transfer of the current policy
    is stored in backward_series[i]; backward holds the final entry.
    """
    learner = LearnerKind(learner)
    vtrace_cfg = _vtrace_for(learner, cfg)
    store = ExperienceStore(cfg.skilled_size, cfg.offpolicy_cap, cfg.retention_fraction, cfg.retention_mode)
    result = ContinualResult(learner, seed, store=store)

    run_dir = None
    if output_dir is not None and cfg.checkpoints:
        run_dir = Path(output_dir) / f"{learner.value}_seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)

    fresh_policy, value = _fresh_networks(sequence[0], cfg, seed)
    theta_meta: Optional[GaussianPolicyHead] = None
    prev_final: Optional[GaussianPolicyHead] = None

    for i, task in enumerate(sequence):
        if i == 0:
            start = fresh_policy
        elif learner.meta_learns and theta_meta is not None:
            start = theta_meta
        else:
            start = prev_final
        result.environments.append(task.index)
        logger.debug(f"[{learner.value} seed={seed}] task {i}: family={task.family.value} param={task.param:.4f}")

        outcome = run_rl(task, start, value, cfg.ppo, store, task_rng(seed, i, STREAM_RL),
                         task_id=i, until_success=cfg.until_success)
        log_task_outcome(learner.value, seed, i, outcome.episodes_used, outcome.solved_at, outcome.skipped_steps)
        for h in outcome.history:
            result.records.append(RunRecord(learner, seed, i, h.episode, h.mean_return, h.success_rate,
                                            outcome.solved_at))
        result.task_policies.append(outcome.policy)
        prev_final = outcome.policy
        value = outcome.value

        if outcome.episodes_used == 0:
            logger.warning(f"Task {i} collected no episodes (budget {cfg.ppo.episode_budget}); nothing to finalize")
        else:
            # M is the solving episode; fixed_budget episodes past it are never retained.
            m = outcome.solved_at if outcome.solved_at is not None else outcome.episodes_used
            store.finalize_task(i, cfg.ppo.episode_budget, task_rng(seed, i, STREAM_FINALIZE), episodes_used=m)

        if learner.meta_learns and outcome.episodes_used > 0:
            meta_start = meta_init_for_task(outcome.policy, theta_meta, cfg.meta, fresh=fresh_policy.copy)
            retained = [tr for j in store.finalized_tasks for tr in store.offpolicy[j]]
            value = fit_value(outcome.value, retained, meta_start, vtrace_cfg,
                              vtrace_cfg.value_fit_steps, vtrace_cfg.value_fit_lr)
            meta = meta_train(meta_start, value, store, store.finalized_tasks, cfg.meta, vtrace_cfg,
                              task_rng(seed, i, STREAM_META))
            theta_meta = meta.policy
            result.meta_diagnostics[i] = meta.diagnostics
            log_meta_diagnostics(learner.value, seed, i, meta.diagnostics)
            _checkpoint(run_dir, f"task{i:02d}_meta", theta_meta)
        _checkpoint(run_dir, f"task{i:02d}", outcome.policy, value)

        current = theta_meta if (learner.meta_learns and theta_meta is not None) else outcome.policy
        eval_rng = task_rng(seed, i, STREAM_EVAL)
        result.backward_series[i] = {
            k: backward_transfer(current, sequence, result.records, k, eval_rng,
                                 n_eval=cfg.eval_trajectories, current=i)
            for k in cfg.backward_ks
        }
        logger.debug(f"[{learner.value} seed={seed}] backward transfer after task {i}: {result.backward_series[i]}")

    result.theta_meta = theta_meta
    result.value = value
    result.current_policy = theta_meta if (learner.meta_learns and theta_meta is not None) else prev_final
    result.backward = dict(result.backward_series[len(sequence) - 1])
    for k, v in result.backward.items():
        logger.info(f"[{learner.value} seed={seed}] backward transfer k={k}: {v}")

    if run_dir is not None:
        manifest_ref = f"sequence_seed{seed}.csv"
        save_store(store, run_dir / "experience.bin", manifest_ref, seed)
    return result


def episodes_to_success(records: Sequence[RunRecord], n_cap: int):
    """Per-learner episodes-to-success curves."""
    return {learner.value: episodes_to_success_curve(rows, n_cap)
            for learner, rows in group_by_learner(records).items()}


@dataclass
class ExperimentResult:
    records: List[RunRecord]
    backward: Dict[Tuple[str, int], Dict[int, Optional[float]]]
    records_path: Optional[Path] = None
    backward_series: Dict[Tuple[str, int], BackwardSeries] = field(default_factory=dict)


def _run_job(cfg: ExperimentConfig, learner: LearnerKind, seed: int,
             output_dir: Optional[str]) -> Tuple[List[RunRecord], BackwardSeries, float]:
    """Pool worker: one (learner, seed) run. Returns plain picklable results."""
    t0 = time.time()
    sequence = make_sequence(cfg.family, cfg.mode, cfg.n_tasks, rng=seed, horizon=cfg.horizon,
                             discount=cfg.discount, success_threshold=cfg.success_threshold)
    out = Path(output_dir) if output_dir else None
    result = run_continual(learner, sequence, cfg, seed, out)
    if out is not None:
        write_csv(result.records, out / f"records_{learner.value}_seed{seed}.csv")
    return result.records, result.backward_series, time.time() - t0


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[Path] = None, workers: int = 1) -> ExperimentResult:
    """
    Every configured learner on every seed. Seeds may run in parallel worker
    processes; each job writes its own CSV and the parts are merged into
    records.csv in (learner, seed) order. A failed run still writes
    run_report.txt with the error before the exception propagates.
    """
    started = datetime.now()
    t0 = time.time()
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        for seed in cfg.seeds:
            sequence = make_sequence(cfg.family, cfg.mode, cfg.n_tasks, rng=seed, horizon=cfg.horizon,
                                     discount=cfg.discount, success_threshold=cfg.success_threshold)
            (out / f"sequence_seed{seed}.csv").write_text(sequence_to_manifest(sequence, cfg.mode),
                                                         encoding="utf-8")

        jobs = [(cfg, LearnerKind(learner), seed, str(out)) for learner in cfg.learners for seed in cfg.seeds]
        logger.info(f"Running {len(jobs)} jobs ({len(cfg.learners)} learners x {len(cfg.seeds)} seeds), "
                    f"workers={workers}")
        if workers > 1 and len(jobs) > 1:
            with Pool(processes=min(workers, len(jobs))) as pool:
                outputs = pool.starmap(_run_job, jobs)
        else:
            outputs = [_run_job(*job) for job in jobs]
    except Exception as e:
        log_run_summary(out / "run_report.txt", serialize_config(cfg), started, time.time() - t0,
                        {}, {}, error=f"{type(e).__name__}: {e}")
        raise

    records: List[RunRecord] = []
    series: Dict[Tuple[str, int], BackwardSeries] = {}
    backward: Dict[Tuple[str, int], Dict[int, Optional[float]]] = {}
    for (_, learner, seed, _), (rows, bt_series, elapsed) in zip(jobs, outputs):
        records.extend(rows)
        series[(learner.value, seed)] = bt_series
        backward[(learner.value, seed)] = dict(bt_series[max(bt_series)]) if bt_series else {}
        logger.debug(f"Job {learner.value}/seed {seed} took {elapsed:.1f}s")

    parts = [out / f"records_{learner.value}_seed{seed}.csv" for _, learner, seed, _ in jobs]
    records_path = out / "records.csv"
    merge_csv(parts, records_path)
    write_backward_csv(series, out / "backward.csv")

    log_run_summary(out / "run_report.txt", serialize_config(cfg), started, time.time() - t0,
                    episodes_to_success(records, cfg.ppo.episode_budget), backward, records_path,
                    backward_series=series)
    return ExperimentResult(records, backward, records_path, series)
