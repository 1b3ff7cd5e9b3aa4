#!/usr/bin/env python3
"""
Test V-trace targets, value fitting and the importance-sampled inner gradient.
"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metacomps.envs import TaskFamily, TaskSpec, Trajectory, rollout_batch
from metacomps.nn import MlpSpec, ParamVector, forward, init_params, init_policy, log_prob, log_prob_grad, zero_params
from metacomps.vtrace import (
    VtraceConfig,
    discounted_returns,
    fit_value,
    fit_value_to_targets,
    inner_adapt,
    is_ratios,
    offpolicy_pg,
    offpolicy_weights,
    value_targets,
    vtrace_from_arrays,
    vtrace_targets,
)


def _rollouts(n=3, horizon=5, seed=0):
    task = TaskSpec(TaskFamily.POINT_GOAL, 0.7, horizon=horizon)
    rng = np.random.default_rng(seed)
    policy = init_policy(4, 2, (6,), 0.5, rng)
    value = init_params(MlpSpec(4, (6,), 1), rng)
    return policy, value, rollout_batch(task, policy, n, rng)


def _with_log_probs(tr, blp):
    return Trajectory(tr.states, tr.actions, tr.rewards, blp, tr.dones, tr.task_id, next_states=tr.next_states)


def _on_policy(policy, tr):
    return _with_log_probs(tr, log_prob(policy, tr.states, tr.actions))


def _literal_vtrace(r, v, rho, c, gamma, n):
    T = len(r)
    v_ext = list(v) + [0.0]
    out = []
    for m in range(T):
        total = v[m]
        for t in range(m, min(m + n, T)):
            prod = 1.0
            for i in range(m, t):
                prod *= c[i]
            total += gamma ** (t - m) * prod * rho[t] * (r[t] + gamma * v_ext[t + 1] - v[t])
        out.append(total)
    return np.array(out)


def test_equal_policies_give_unit_ratios():
    policy, _, trajs = _rollouts()
    ratios = is_ratios(policy, _on_policy(policy, trajs[0]), VtraceConfig())
    assert np.array_equal(ratios.raw, np.ones(5))
    assert np.array_equal(ratios.rho, np.ones(5)) and np.array_equal(ratios.c, np.ones(5))


def test_large_gap_is_truncated():
    policy, _, trajs = _rollouts()
    tr = _on_policy(policy, trajs[0])
    shifted = _with_log_probs(tr, tr.behavior_log_probs - 10.0)
    ratios = is_ratios(policy, shifted, VtraceConfig(rho_bar=1.0, c_bar=1.0))
    assert ratios.raw == pytest.approx(np.full(5, math.exp(10.0)), rel=1e-9)
    assert np.array_equal(ratios.rho, np.ones(5))
    assert ratios.saturated == 0


def test_overflowing_ratio_saturates_at_cap():
    policy, _, trajs = _rollouts()
    tr = _on_policy(policy, trajs[0])
    shifted = _with_log_probs(tr, tr.behavior_log_probs - 1000.0)
    ratios = is_ratios(policy, shifted, VtraceConfig(rho_bar=2e6, c_bar=2e6))
    assert np.array_equal(ratios.raw, np.full(5, 1e6))
    assert ratios.saturated == 5


def test_ratios_match_recomputed_densities():
    policy, _, trajs = _rollouts(seed=4)
    other = init_policy(4, 2, (6,), 0.7, np.random.default_rng(99))
    tr = trajs[0]
    expected = np.exp(log_prob(other, tr.states, tr.actions) - tr.behavior_log_probs)
    assert is_ratios(other, tr, VtraceConfig(rho_bar=1e6, c_bar=1e6)).raw == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("gamma", [0.9, 1.0])
def test_on_policy_targets_telescope_to_monte_carlo(gamma):
    rng = np.random.default_rng(12)
    for _ in range(200):
        T = int(rng.integers(1, 30))
        r = rng.normal(size=T)
        v = rng.normal(size=T)
        ones = np.ones(T)
        targets = vtrace_from_arrays(r, v, ones, ones, gamma, T)
        mc = np.array([sum(gamma ** (t - m) * r[t] for t in range(m, T)) for m in range(T)])
        assert np.max(np.abs(targets - mc)) < 1e-9


def test_targets_with_policy_rollouts_telescope():
    policy, value, trajs = _rollouts(n=4, horizon=8, seed=2)
    cfg = VtraceConfig(rho_bar=1e6, c_bar=1e6, n=8, gamma=0.9)
    for tr in trajs:
        tr = _on_policy(policy, tr)
        mc = np.array([sum(0.9 ** (t - m) * tr.rewards[t] for t in range(m, 8)) for m in range(8)])
        assert np.max(np.abs(vtrace_targets(tr, value, policy, cfg) - mc)) < 1e-9


def test_targets_match_literal_double_sum():
    rng = np.random.default_rng(21)
    for _ in range(50):
        T = int(rng.integers(1, 7))
        rho_bar, c_bar = rng.uniform(0.5, 2.0, size=2)
        raw = np.exp(rng.normal(scale=0.7, size=T))
        rho, c = np.minimum(rho_bar, raw), np.minimum(c_bar, raw)
        r, v = rng.normal(size=T), rng.normal(size=T)
        gamma = float(rng.uniform(0.8, 1.0))
        n = int(rng.integers(1, T + 2))
        expected = _literal_vtrace(r, v, rho, c, gamma, n)
        assert np.max(np.abs(vtrace_from_arrays(r, v, rho, c, gamma, n) - expected)) < 1e-12


def test_four_step_hand_expansion():
    r = np.array([1.0, 0.0, 2.0, -1.0])
    v = np.array([0.5, 0.2, -0.3, 0.1])
    rho = np.array([1.0, 0.5, 0.8, 1.0])
    c = np.array([0.9, 0.4, 1.0, 1.0])
    g = 0.9
    d = rho * (r + g * np.append(v[1:], 0.0) - v)
    expected = [
        v[0] + d[0] + g * c[0] * d[1],
        v[1] + d[1] + g * c[1] * d[2],
        v[2] + d[2] + g * c[2] * d[3],
        v[3] + d[3],
    ]
    assert vtrace_from_arrays(r, v, rho, c, g, 2) == pytest.approx(expected, abs=1e-14)


def test_zero_rho_keeps_values():
    v = np.array([0.3, -1.0, 2.0])
    targets = vtrace_from_arrays(np.ones(3), v, np.zeros(3), np.ones(3), 0.99, 10)
    assert np.array_equal(targets, v)


def test_smaller_rho_bar_stays_closer_to_values():
    r = np.array([1.0, 2.0, 0.5, 1.5])
    v = np.zeros(4)
    raw = np.full(4, 2.0)
    small = vtrace_from_arrays(r, v, np.minimum(1.0, raw), np.minimum(1.0, raw), 0.9, 4)
    large = vtrace_from_arrays(r, v, np.minimum(1.5, raw), np.minimum(1.0, raw), 0.9, 4)
    assert np.all(np.abs(small - v) <= np.abs(large - v))


def test_fit_value_zero_steps_returns_same_parameters():
    policy, value, trajs = _rollouts()
    assert np.array_equal(fit_value(value, trajs, policy, VtraceConfig(), 0, 0.01).values, value.values)


def test_fit_matched_targets_leaves_value_unchanged():
    _, value, trajs = _rollouts()
    states = trajs[0].states
    fitted = fit_value_to_targets(value, states, forward(value, states)[:, 0], 5, 0.01)
    assert np.array_equal(fitted.values, value.values)


def test_fit_constant_targets_with_linear_value():
    spec = MlpSpec(2, (), 1, activation="identity")
    value = ParamVector(np.zeros(spec.param_count), spec)
    states = np.random.default_rng(0).normal(size=(40, 2))
    fitted = fit_value_to_targets(value, states, np.full(40, 3.0), 3000, 0.01)
    assert forward(fitted, states)[:, 0] == pytest.approx(np.full(40, 3.0), abs=0.05)


def test_fit_value_rejects_empty_data():
    policy, value, _ = _rollouts()
    with pytest.raises(ValueError):
        fit_value(value, [], policy, VtraceConfig(), 5, 0.01)


def test_zero_advantage_gives_zero_gradient():
    policy, _, trajs = _rollouts()
    tr = trajs[0]
    zero_reward = Trajectory(tr.states, tr.actions, np.zeros(5), tr.behavior_log_probs, tr.dones, 0)
    grad = offpolicy_pg(policy, zero_params(MlpSpec(4, (6,), 1)), [zero_reward], VtraceConfig())
    assert np.array_equal(grad, np.zeros(policy.size))


def test_single_step_gradient_is_one_term():
    policy = init_policy(4, 2, (6,), 0.5, np.random.default_rng(3))
    s = np.array([[0.1, -0.2, 0.0, 0.3]])
    a = np.array([[0.4, -0.1]])
    blp = log_prob(policy, s, a) - math.log(0.5)
    tr = Trajectory(s, a, np.array([2.0]), blp, np.array([True]), 0)
    grad = offpolicy_pg(policy, zero_params(MlpSpec(4, (6,), 1)), [tr], VtraceConfig())
    expected = 0.5 * 2.0 * log_prob_grad(policy, s, a, np.ones(1))
    assert grad == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_on_policy_estimator_matches_baselined_reinforce():
    policy, value, trajs = _rollouts(n=2, horizon=2, seed=6)
    trajs = [_on_policy(policy, tr) for tr in trajs]
    cfg = VtraceConfig(rho_bar=1e6, c_bar=1e6, n=2, gamma=1.0)
    grad = offpolicy_pg(policy, value, trajs, cfg)
    states = np.concatenate([tr.states for tr in trajs])
    actions = np.concatenate([tr.actions for tr in trajs])
    weights = []
    for tr in trajs:
        returns = np.cumsum(tr.rewards[::-1])[::-1]
        weights.append(returns - forward(value, tr.states)[:, 0])
    expected = log_prob_grad(policy, states, actions, np.concatenate(weights) / 4)
    assert grad == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_gradient_of_frozen_weight_surrogate():
    policy, value, trajs = _rollouts(n=2, horizon=4, seed=8)
    other = init_policy(4, 2, (6,), 0.55, np.random.default_rng(5))
    other = other.with_vector(policy.to_vector() + 0.05 * (other.to_vector() - policy.to_vector()))
    cfg = VtraceConfig()
    grad = offpolicy_pg(other, value, trajs, cfg)

    w = np.concatenate([np.prod(offpolicy_weights(other, value, tr, cfg), axis=0) for tr in trajs])
    states = np.concatenate([tr.states for tr in trajs])
    actions = np.concatenate([tr.actions for tr in trajs])
    theta = other.to_vector()
    numeric = np.zeros_like(theta)
    h = 1e-5
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        up = np.sum(w * log_prob(other.with_vector(theta + e), states, actions)) / w.size
        down = np.sum(w * log_prob(other.with_vector(theta - e), states, actions)) / w.size
        numeric[i] = (up - down) / (2 * h)
    assert np.max(np.abs(grad - numeric)) / (np.max(np.abs(numeric)) + 1e-8) < 1e-4


def test_clipped_is_estimator_weights():
    policy, value, trajs = _rollouts()
    tr = _on_policy(policy, trajs[0])
    shifted = _with_log_probs(tr, tr.behavior_log_probs - math.log(1.5))
    weight, adv = offpolicy_weights(policy, value, shifted, VtraceConfig(estimator="clipped_is", clip_eps=0.2))
    assert weight == pytest.approx(np.full(5, 1.2))
    v = forward(value, tr.states)[:, 0]
    assert adv == pytest.approx(tr.rewards + 0.99 * np.append(v[1:], 0.0) - v, abs=1e-12)


def test_offpolicy_pg_rejects_empty_data():
    policy, value, _ = _rollouts()
    with pytest.raises(ValueError):
        offpolicy_pg(policy, value, [], VtraceConfig())


def test_inner_adapt_identity_and_linearity():
    policy, value, trajs = _rollouts()
    before = policy.to_vector().copy()
    assert np.array_equal(inner_adapt(policy, value, trajs, 0.0, VtraceConfig()).to_vector(), before)
    g = offpolicy_pg(policy, value, trajs, VtraceConfig())
    phi = inner_adapt(policy, value, trajs, 0.01, VtraceConfig())
    assert phi.to_vector() - before == pytest.approx(0.01 * g, abs=1e-15)
    assert np.array_equal(policy.to_vector(), before)
    again = inner_adapt(policy, value, trajs, 0.01, VtraceConfig())
    assert np.array_equal(again.to_vector(), phi.to_vector())


def test_inner_adapt_can_freeze_log_std():
    policy, value, trajs = _rollouts()
    phi = inner_adapt(policy, value, trajs, 0.05, VtraceConfig(), adapt_log_std=False)
    assert np.array_equal(phi.log_std, policy.log_std)


def test_clipped_is_value_targets_are_discounted_returns():
    policy, value, trajs = _rollouts(n=3, horizon=6, seed=12)
    other = init_policy(4, 2, (6,), 0.7, np.random.default_rng(13))
    cfg = VtraceConfig(estimator="clipped_is", gamma=0.9, rho_bar=0.5, c_bar=0.5)
    for tr in trajs:
        mc = np.array([sum(0.9 ** (t - m) * tr.rewards[t] for t in range(m, 6)) for m in range(6)])
        assert np.max(np.abs(value_targets(tr, value, other, cfg) - mc)) < 1e-12
        assert np.array_equal(discounted_returns(tr.rewards, 0.9), value_targets(tr, value, other, cfg))


def test_clipped_is_value_fit_ignores_truncation_levels():
    policy, value, trajs = _rollouts(n=3, horizon=6, seed=14)
    other = init_policy(4, 2, (6,), 0.7, np.random.default_rng(15))
    fits = {}
    for estimator in ("vtrace", "clipped_is"):
        for bar in (0.5, 5.0):
            cfg = VtraceConfig(estimator=estimator, rho_bar=bar, c_bar=bar)
            fits[estimator, bar] = fit_value(value, trajs, other, cfg, steps=5, lr=0.01).values
    assert np.array_equal(fits["clipped_is", 0.5], fits["clipped_is", 5.0])
    assert not np.array_equal(fits["vtrace", 0.5], fits["vtrace", 5.0])


def test_unset_gamma_falls_back_to_default_discount():
    assert VtraceConfig().gamma is None
    assert VtraceConfig().effective_gamma == 0.99
    assert VtraceConfig(gamma=0.5).effective_gamma == 0.5


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
