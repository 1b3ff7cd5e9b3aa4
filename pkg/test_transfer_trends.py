#!/usr/bin/env python3
"""
Long-running trend checks on full continual runs. Deselected by default;
run with `pytest -m slow` or ./run_transfer_experiment.sh.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metacomps.buffer import ExperienceStore
from metacomps.config import ExperimentConfig, LearnerKind
from metacomps.driver import STREAM_INIT, STREAM_RL, episodes_to_success, run_continual, run_experiment, task_rng
from metacomps.envs import SequenceMode, TaskFamily, TaskSpec, make_sequence
from metacomps.meta import mean_adapted_bc_gap
from metacomps.nn import MlpSpec, init_params, init_policy
from metacomps.ppo import run_rl
from metacomps.results import window_mean

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4, 5)


def _desk(**overrides):
    return ExperimentConfig(seeds=SEEDS, checkpoints=False, **overrides)


def test_ppo_solves_a_single_task_within_budget():
    cfg = _desk(n_tasks=1)
    task = TaskSpec(TaskFamily.POINT_DIRECTION, 0.7, horizon=cfg.horizon)
    used = []
    for seed in SEEDS:
        rng = task_rng(seed, 0, STREAM_INIT)
        policy = init_policy(task.state_dim, task.action_dim, cfg.policy.hidden_dims, cfg.policy.init_std, rng)
        value = init_params(MlpSpec(task.state_dim, cfg.policy.value_hidden_dims, 1), rng)
        outcome = run_rl(task, policy, value, cfg.ppo, ExperienceStore(), task_rng(seed, 0, STREAM_RL))
        used.append(outcome.solved_at or cfg.ppo.episode_budget)
    print(f"PPO episodes to success per seed: {used}")
    assert float(np.median(used)) < cfg.ppo.episode_budget


def test_comps_solves_later_tasks_faster(tmp_path):
    cfg = _desk(family=TaskFamily.POINT_DIRECTION, mode=SequenceMode.STATIONARY, n_tasks=10,
                learners=(LearnerKind.COMPS, LearnerKind.PPO_TL))
    result = run_experiment(cfg, tmp_path)
    curves = episodes_to_success(result.records, cfg.ppo.episode_budget)
    comps, ppotl = curves["comps"], curves["ppotl"]
    assert window_mean(comps, 5, 9) < window_mean(comps, 0, 4)
    assert window_mean(comps, 5, 9) <= window_mean(ppotl, 5, 9)

    for (learner, seed), values in result.backward.items():
        assert sorted(values) == [1, 2, 3, 4, 5]


def test_vtrace_ablation_is_not_better_under_drift(tmp_path):
    cfg = _desk(family=TaskFamily.POINT_GOAL, mode=SequenceMode.NONSTATIONARY, n_tasks=10,
                learners=(LearnerKind.COMPS, LearnerKind.COMPS_NO_VTRACE))
    result = run_experiment(cfg, tmp_path)
    curves = episodes_to_success(result.records, cfg.ppo.episode_budget)
    ratio = float(np.mean(curves["novtrace"].mean)) / float(np.mean(curves["comps"].mean))
    print(f"novtrace / comps episodes-to-success ratio: {ratio:.3f}")
    assert ratio >= 1.0


def test_identical_tasks_transfer():
    cfg = _desk(n_tasks=2)
    task = TaskSpec(TaskFamily.POINT_DIRECTION, 0.7, horizon=cfg.horizon)
    sequence = [task, TaskSpec(task.family, task.param, horizon=cfg.horizon, index=1)]
    for learner in (LearnerKind.COMPS, LearnerKind.PPO_TL):
        faster = 0
        for seed in SEEDS:
            run = run_continual(learner, sequence, cfg, seed)
            by_task = {r.task_index: r.solved_at or cfg.ppo.episode_budget for r in run.records}
            faster += by_task[1] <= by_task[0]
        assert faster >= 4, learner


def test_adapted_policy_clones_skilled_data_better():
    cfg = _desk(n_tasks=4)
    sequence = make_sequence(cfg.family, cfg.mode, cfg.n_tasks, rng=0, horizon=cfg.horizon)
    run = run_continual(LearnerKind.COMPS, sequence, cfg, seed=0)
    before, after = mean_adapted_bc_gap(run.theta_meta, run.value, run.store, list(range(cfg.n_tasks)),
                                        cfg.meta, cfg.vtrace, task_rng(0, cfg.n_tasks, 99))
    assert after < before


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-m", "slow"]))
