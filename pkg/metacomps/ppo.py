"""
On-policy task adaptation with the clipped surrogate objective.

The behavior policy theta' of an episode is the policy that sampled it; its
log-probabilities are recorded at sampling time, so the ratio
r_t = exp(log pi_theta(a_t|s_t) - behavior_log_prob_t) needs no snapshot copy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .buffer import ExperienceStore
from .envs import TaskSpec, Trajectory, batch_success, rollout_batch
from .errors import NonFiniteRatio, require
from .nn import AdamState, GaussianPolicyHead, ParamVector, adam_step, backward, forward, log_prob, log_prob_grad

logger = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    policy_lr: float = 0.003
    value_lr: float = 0.005
    trajectories_per_episode: int = 10
    updates_per_episode: int = 8
    minibatch_size: int = 64
    gamma: Optional[float] = None
    episode_budget: int = 150
    gae_lambda: Optional[float] = None
    normalize_advantages: bool = True

    def __post_init__(self) -> None:
        require(0.0 < self.clip_eps < 1.0, "ppo.clip_eps", self.clip_eps, "(0, 1)")
        require(self.policy_lr > 0.0, "ppo.policy_lr", self.policy_lr, "> 0")
        require(self.value_lr > 0.0, "ppo.value_lr", self.value_lr, "> 0")
        for key in ("trajectories_per_episode", "updates_per_episode", "minibatch_size"):
            value = getattr(self, key)
            require(value >= 1, f"ppo.{key}", value, ">= 1")
        if self.gamma is not None:
            require(0.0 < self.gamma <= 1.0, "ppo.gamma", self.gamma, "(0, 1]")
        # A budget of 0 is a legal degenerate run: nothing is collected.
        require(self.episode_budget >= 0, "ppo.episode_budget", self.episode_budget, ">= 0")
        if self.gae_lambda is not None:
            require(0.0 <= self.gae_lambda <= 1.0, "ppo.gae_lambda", self.gae_lambda, "[0, 1] or none")


@dataclass
class EpisodeStats:
    episode: int
    mean_return: float
    success_rate: float


@dataclass
class RlOutcome:
    policy: GaussianPolicyHead
    value: ParamVector
    episodes_used: int
    solved: bool
    solved_at: Optional[int]
    history: List[EpisodeStats] = field(default_factory=list)
    skipped_steps: int = 0


def _values(value: ParamVector, states: np.ndarray) -> np.ndarray:
    return forward(value, states)[:, 0]


def compute_advantages(trajectory: Trajectory, value: ParamVector, gamma: float,
                       gae_lambda: Optional[float] = None) -> np.ndarray:
    """
    One-step advantages A_t = r_t + gamma V(s_{t+1}) - V(s_t), with V = 0 past
    the terminal step. With gae_lambda set, the lambda-weighted sum of those
    one-step terms is returned instead.
    """
    v = _values(value, trajectory.states)
    v_next = np.append(v[1:], 0.0)
    if trajectory.dones.size and not trajectory.dones[-1]:
        logger.debug("Trajectory truncated before terminal; bootstrapping with 0")
    deltas = trajectory.rewards + gamma * v_next - v
    if gae_lambda is None:
        return deltas
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + gamma * gae_lambda * running
        adv[t] = running
    return adv


def ppo_loss(policy: GaussianPolicyHead, states: np.ndarray, actions: np.ndarray,
             advantages: np.ndarray, behavior_log_probs: np.ndarray,
             clip_eps: float) -> Tuple[float, np.ndarray]:
    """
    Negative clipped surrogate and its exact gradient w.r.t. the policy vector.

    Samples where the clipped branch is the minimum contribute no gradient.
    Raises NonFiniteRatio when any ratio overflows.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(log_prob(policy, states, actions) - behavior_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteRatio(f"{int(np.sum(~np.isfinite(ratio)))} non-finite PPO ratios")
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    n = advantages.size
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    weights = np.where(active, -ratio * advantages / n, 0.0)
    return loss, log_prob_grad(policy, states, actions, weights)


def value_loss(value: ParamVector, states: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error to detached targets, with its gradient."""
    err = _values(value, states) - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(err ** 2))
    grad = backward(value, states, (2.0 * err / err.size)[:, None])
    return loss, grad


def _flatten(trajectories: Sequence[Trajectory], value: ParamVector,
             cfg: PpoConfig, gamma: float) -> Tuple[np.ndarray, ...]:
    states = np.concatenate([tr.states for tr in trajectories])
    actions = np.concatenate([tr.actions for tr in trajectories])
    blp = np.concatenate([tr.behavior_log_probs for tr in trajectories])
    adv = np.concatenate([compute_advantages(tr, value, gamma, cfg.gae_lambda) for tr in trajectories])
    targets = []
    for tr in trajectories:
        v = _values(value, tr.states)
        targets.append(tr.rewards + gamma * np.append(v[1:], 0.0))
    if cfg.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return states, actions, blp, adv, np.concatenate(targets)


def run_rl(task: TaskSpec, policy_init: GaussianPolicyHead, value_init: ParamVector,
           cfg: PpoConfig, store: ExperienceStore, rng: np.random.Generator,
           task_id: Optional[int] = None, until_success: bool = True) -> RlOutcome:
    """
    Train on one task: collect an episode, record it, stop if the batch
    success reaches the task threshold, otherwise run the PPO and value
    updates. Budget exhaustion returns solved=False; it is not an error.

    With until_success=False training continues for the whole budget and
    solved_at marks the first episode that reached the threshold.
    Returns are discounted with cfg.gamma, or with task.discount when unset.
    """
    task_id = task.index if task_id is None else task_id
    gamma = task.discount if cfg.gamma is None else cfg.gamma
    policy = policy_init.copy()
    value = value_init.copy()
    policy_opt = AdamState.zeros(policy.size)
    value_opt = AdamState.zeros(value.spec.param_count)
    history: List[EpisodeStats] = []
    solved_at: Optional[int] = None
    skipped = 0
    episodes_used = 0

    for episode in range(1, cfg.episode_budget + 1):
        trajectories = rollout_batch(task, policy, cfg.trajectories_per_episode, rng, task_id=task_id)
        store.record_batch(task_id, trajectories)
        episodes_used = episode
        rate = batch_success(task, trajectories)
        mean_return = float(np.mean([tr.return_ for tr in trajectories]))
        history.append(EpisodeStats(episode, mean_return, rate))
        logger.debug(f"Task {task_id} episode {episode}: return {mean_return:.3f}, success {rate:.3f}")
        if rate >= task.success_threshold and solved_at is None:
            solved_at = episode
            if until_success:
                break

        states, actions, blp, adv, targets = _flatten(trajectories, value, cfg, gamma)
        n = states.shape[0]
        for _ in range(cfg.updates_per_episode):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                try:
                    _, grad = ppo_loss(policy, states[idx], actions[idx], adv[idx], blp[idx], cfg.clip_eps)
                except NonFiniteRatio as e:
                    skipped += 1
                    logger.warning(f"Skipping PPO step on task {task_id} ({e}); skipped so far: {skipped}")
                    continue
                vec, policy_opt = adam_step(policy.to_vector(), grad, policy_opt, cfg.policy_lr)
                policy = policy.with_vector(vec)
                _, vgrad = value_loss(value, states[idx], targets[idx])
                vvec, value_opt = adam_step(value.values, vgrad, value_opt, cfg.value_lr)
                value = value.with_values(vvec)

    solved = solved_at is not None
    logger.info(f"Task {task_id}: {'solved' if solved else 'not solved'} after {episodes_used} episodes")
    return RlOutcome(policy, value, episodes_used, solved, solved_at, history, skipped)
