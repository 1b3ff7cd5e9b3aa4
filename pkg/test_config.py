#!/usr/bin/env python3
"""
Test the sectioned key=value configuration format.
"""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metacomps.config import ExperimentConfig, LearnerKind, PolicyConfig, parse_config, serialize_config
from metacomps.envs import SequenceMode, TaskFamily
from metacomps.errors import ConfigError
from metacomps.meta import MetaConfig
from metacomps.ppo import PpoConfig
from metacomps.vtrace import VtraceConfig


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg.n_tasks == 10 and cfg.seeds == (0, 1, 2, 3, 4, 5)
    assert cfg.ppo.episode_budget == 150 and cfg.ppo.clip_eps == 0.2
    assert cfg.meta.n_meta == 25 and cfg.meta.outer_lr == 0.005 and cfg.meta.bc_steps_per_task == 5
    assert cfg.vtrace.rho_bar == 1.0 and cfg.vtrace.c_bar == 1.0 and cfg.vtrace.n == 10
    assert cfg.policy.hidden_dims == (128, 64) and cfg.policy.init_std == 0.5


def test_dotted_key():
    assert parse_config("meta.inner_lr=0.005").meta.inner_lr == 0.005
    assert parse_config("meta.inner_lr = 0.0025  # hard preset").meta.inner_lr == 0.0025


def test_sections_and_types():
    text = """
    # desk run
    family = point_goal
    mode = nonstationary
    learners = comps, novtrace
    seeds = 3,4

    [ppo]
    gae_lambda = 0.95
    normalize_advantages = false

    [vtrace]
    estimator = clipped_is

    [policy]
    hidden_dims = 32,32
    """
    cfg = parse_config(text)
    assert cfg.family == TaskFamily.POINT_GOAL and cfg.mode == SequenceMode.NONSTATIONARY
    assert cfg.learners == (LearnerKind.COMPS, LearnerKind.COMPS_NO_VTRACE)
    assert cfg.seeds == (3, 4)
    assert cfg.ppo.gae_lambda == 0.95 and cfg.ppo.normalize_advantages is False
    assert cfg.vtrace.estimator == "clipped_is"
    assert cfg.policy.hidden_dims == (32, 32)


def test_range_violation_names_key_and_range():
    with pytest.raises(ConfigError, match=r"ppo.clip_eps=2.0 is invalid; allowed: \(0, 1\)"):
        parse_config("ppo.clip_eps=2.0")


@pytest.mark.parametrize("text", [
    "ppo.bogus=1",
    "[nosuch]\nx=1",
    "experiment.n_tasks=ten",
    "experiment.n_tasks=41",
    "learners=comps,sac",
    "meta.second_order=true",
    "seeds=",
    "just a line",
])
def test_invalid_text_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_discounts_default_to_the_task_discount():
    cfg = parse_config("discount = 0.95\n[meta]\nwarm_start = false")
    assert cfg.ppo.gamma is None and cfg.vtrace.gamma is None
    assert cfg.meta.warm_start is False
    assert ExperimentConfig().meta.warm_start is True
    explicit = parse_config("ppo.gamma = 0.9\nvtrace.gamma = none")
    assert explicit.ppo.gamma == 0.9 and explicit.vtrace.gamma is None
    with pytest.raises(ConfigError, match="vtrace.gamma"):
        parse_config("vtrace.gamma = 1.5")


def test_serialize_then_parse_is_identity():
    cfg = ExperimentConfig(
        family=TaskFamily.CHAIN_VELOCITY,
        n_tasks=4,
        learners=(LearnerKind.PPO_TL,),
        seeds=(7,),
        success_threshold=0.25,
        backward_ks=(1, 3),
        policy=PolicyConfig(hidden_dims=(16,), init_std=0.3),
        ppo=PpoConfig(gae_lambda=0.9, episode_budget=40),
        vtrace=VtraceConfig(rho_bar=2.0, discount_vnext=True),
        meta=MetaConfig(warm_start=False, outer_optimizer="adam", inner_lr=1e-4),
    )
    assert parse_config(serialize_config(cfg)) == cfg
    assert parse_config(serialize_config(ExperimentConfig())) == ExperimentConfig()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
