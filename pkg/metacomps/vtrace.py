"""
Off-policy inner-loop gradient: V-trace value targets, value fitting and the
importance-sampled policy gradient used to adapt theta on stored data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .envs import DEFAULT_DISCOUNT, Trajectory
from .errors import require
from .nn import AdamState, GaussianPolicyHead, ParamVector, adam_step, backward, forward, log_prob, log_prob_grad

logger = logging.getLogger(__name__)

Estimator = Literal["vtrace", "clipped_is"]


@dataclass
class VtraceConfig:
    rho_bar: float = 1.0
    c_bar: float = 1.0
    n: int = 10
    gamma: Optional[float] = None
    ratio_cap: float = 1e6
    discount_vnext: bool = False
    estimator: Estimator = "vtrace"
    clip_eps: float = 0.2
    value_fit_steps: int = 50
    value_fit_lr: float = 0.005
    refit_value_each_iteration: bool = False

    def __post_init__(self) -> None:
        require(self.rho_bar > 0.0, "vtrace.rho_bar", self.rho_bar, "> 0")
        require(self.c_bar > 0.0, "vtrace.c_bar", self.c_bar, "> 0")
        require(self.n >= 1, "vtrace.n", self.n, ">= 1")
        if self.gamma is not None:
            require(0.0 < self.gamma <= 1.0, "vtrace.gamma", self.gamma, "(0, 1]")
        require(self.ratio_cap >= 1.0, "vtrace.ratio_cap", self.ratio_cap, ">= 1")
        require(self.estimator in ("vtrace", "clipped_is"), "vtrace.estimator", self.estimator,
                "vtrace | clipped_is")
        require(0.0 < self.clip_eps < 1.0, "vtrace.clip_eps", self.clip_eps, "(0, 1)")
        require(self.value_fit_steps >= 0, "vtrace.value_fit_steps", self.value_fit_steps, ">= 0")
        require(self.value_fit_lr > 0.0, "vtrace.value_fit_lr", self.value_fit_lr, "> 0")
        if self.rho_bar < self.c_bar:
            logger.warning(f"rho_bar={self.rho_bar} < c_bar={self.c_bar}; V-trace usually uses rho_bar >= c_bar")

    @property
    def effective_gamma(self) -> float:
        """gamma, or the task discount default when unset."""
        return DEFAULT_DISCOUNT if self.gamma is None else self.gamma



class IsRatios(NamedTuple):
    raw: np.ndarray
    rho: np.ndarray
    c: np.ndarray
    saturated: int


def is_ratios(policy: GaussianPolicyHead, trajectory: Trajectory, cfg: VtraceConfig) -> IsRatios:
    """Raw ratios pi_theta / pi_behavior and their truncations min(rho_bar, r), min(c_bar, r)."""
    log_ratio = log_prob(policy, trajectory.states, trajectory.actions) - trajectory.behavior_log_probs
    log_cap = math.log(cfg.ratio_cap)
    over = log_ratio > log_cap
    saturated = int(np.sum(over))
    if saturated:
        logger.warning(f"{saturated} importance ratios saturated at {cfg.ratio_cap:g}")
    raw = np.where(over, cfg.ratio_cap, np.exp(np.minimum(log_ratio, log_cap)))
    return IsRatios(raw, np.minimum(cfg.rho_bar, raw), np.minimum(cfg.c_bar, raw), saturated)


def _state_values(value: ParamVector, trajectory: Trajectory) -> np.ndarray:
    return forward(value, trajectory.states)[:, 0]


def vtrace_from_arrays(rewards: np.ndarray, values: np.ndarray, rho: np.ndarray, c: np.ndarray,
                       gamma: float, n: int) -> np.ndarray:
    """
    n-step V-trace targets
        v_m = V(s_m) + sum_{t=m}^{m+n-1} gamma^(t-m) (prod_{i=m}^{t-1} c_i) rho_t delta_t
    with delta_t = r_t + gamma V(s_{t+1}) - V(s_t), V = 0 past the last step,
    and the sum truncated at the end of the trajectory.
    """
    T = rewards.shape[0]
    v_next = np.append(values[1:], 0.0)
    weighted_td = rho * (rewards + gamma * v_next - values)
    targets = values.copy()
    coef = np.ones(T)
    for k in range(min(n, T)):
        span = T - k
        targets[:span] += coef[:span] * weighted_td[k:]
        # coef[m] becomes gamma^(k+1) * prod_{i=m}^{m+k} c_i
        coef[:span - 1] = coef[:span - 1] * gamma * c[k:T - 1]
    return targets


def vtrace_targets(trajectory: Trajectory, value: ParamVector, policy: GaussianPolicyHead,
                   cfg: VtraceConfig) -> np.ndarray:
    ratios = is_ratios(policy, trajectory, cfg)
    return vtrace_from_arrays(trajectory.rewards, _state_values(value, trajectory),
                              ratios.rho, ratios.c, cfg.effective_gamma, cfg.n)


def fit_value_to_targets(value: ParamVector, states: np.ndarray, targets: np.ndarray,
                         steps: int, lr: float) -> ParamVector:
    """Adam on the mean squared error to fixed targets; reverts if the loss blows up 10x."""
    targets = np.asarray(targets, dtype=np.float64)
    current = value.copy()
    opt = AdamState.zeros(value.spec.param_count)
    start_loss = None
    for i in range(steps):
        err = forward(current, states)[:, 0] - targets
        loss = float(np.mean(err ** 2))
        if start_loss is None:
            start_loss = loss
        elif loss > 10.0 * start_loss and loss > 1e-12:
            logger.warning(f"Value fit diverged at step {i} (loss {start_loss:.4g} -> {loss:.4g}); reverting")
            return value.copy()
        grad = backward(current, states, (2.0 * err / err.size)[:, None])
        vec, opt = adam_step(current.values, grad, opt, lr)
        current = current.with_values(vec)
    return current


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Monte-Carlo returns G_m = sum_{t>=m} gamma^(t-m) r_t, zero past the last step."""
    out = np.zeros(rewards.shape[0], dtype=np.float64)
    running = 0.0
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def value_targets(trajectory: Trajectory, value: ParamVector, policy: GaussianPolicyHead,
                  cfg: VtraceConfig) -> np.ndarray:
    """Regression targets for V_omega: V-trace targets, or plain discounted returns under clipped_is."""
    if cfg.estimator == "clipped_is":
        return discounted_returns(trajectory.rewards, cfg.effective_gamma)
    return vtrace_targets(trajectory, value, policy, cfg)


def fit_value(value: ParamVector, trajectories: Sequence[Trajectory], policy: GaussianPolicyHead,
              cfg: VtraceConfig, steps: int, lr: float) -> ParamVector:
    """Regress V_omega onto value_targets computed once from the pre-fit omega."""
    if not trajectories:
        raise ValueError("fit_value needs at least one trajectory")
    if steps == 0:
        return value.copy()
    states = np.concatenate([tr.states for tr in trajectories])
    targets = np.concatenate([value_targets(tr, value, policy, cfg) for tr in trajectories])
    return fit_value_to_targets(value, states, targets, steps, lr)


def offpolicy_weights(policy: GaussianPolicyHead, value: ParamVector, trajectory: Trajectory,
                      cfg: VtraceConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-step importance weight and advantage for the inner gradient.

    vtrace: rho_t and A_m = r_m + v_{m+1} - V(s_m) (gamma on v_{m+1} only with
    discount_vnext). clipped_is: clip(r_t, 1-eps, 1+eps) and the plain one-step
    advantage r_m + gamma V(s_{m+1}) - V(s_m).
    """
    ratios = is_ratios(policy, trajectory, cfg)
    values = _state_values(value, trajectory)
    if cfg.estimator == "clipped_is":
        weight = np.clip(ratios.raw, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
        adv = trajectory.rewards + cfg.effective_gamma * np.append(values[1:], 0.0) - values
        return weight, adv
    v = vtrace_from_arrays(trajectory.rewards, values, ratios.rho, ratios.c, cfg.effective_gamma, cfg.n)
    v_next = np.append(v[1:], 0.0)
    scale = cfg.effective_gamma if cfg.discount_vnext else 1.0
    return ratios.rho, trajectory.rewards + scale * v_next - values


def offpolicy_pg(policy: GaussianPolicyHead, value: ParamVector, trajectories: Sequence[Trajectory],
                 cfg: VtraceConfig) -> np.ndarray:
    """(1/N) sum_i rho_i grad log pi(a_i|s_i) A_i over every step of every trajectory."""
    if not trajectories:
        raise ValueError("offpolicy_pg needs at least one trajectory")
    weights: List[np.ndarray] = []
    for tr in trajectories:
        rho, adv = offpolicy_weights(policy, value, tr, cfg)
        weights.append(rho * adv)
    w = np.concatenate(weights)
    states = np.concatenate([tr.states for tr in trajectories])
    actions = np.concatenate([tr.actions for tr in trajectories])
    return log_prob_grad(policy, states, actions, w / w.size)


def inner_adapt(policy: GaussianPolicyHead, value: ParamVector, trajectories: Sequence[Trajectory],
                alpha: float, cfg: VtraceConfig, adapt_log_std: bool = True) -> GaussianPolicyHead:
    """phi = theta + alpha * offpolicy_pg(theta); theta itself is left untouched."""
    if alpha < 0.0:
        raise ValueError(f"Inner learning rate must be >= 0, got {alpha}")
    if alpha == 0.0:
        return policy.copy()
    grad = offpolicy_pg(policy, value, trajectories, cfg)
    if not adapt_log_std:
        grad[-policy.action_dim:] = 0.0
    return policy.with_vector(policy.to_vector() + alpha * grad)
