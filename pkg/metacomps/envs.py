"""
Desk-scale task families and the rollout machinery.

Three analytic families stand in for goal-reaching, heading and target-speed
locomotion tasks. Dynamics are deterministic; all randomness comes from the
reset noise and from action sampling.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericalAbort
from .nn import GaussianPolicyHead, sample_action
from .units import deg_to_rad, velocity_to_desk

logger = logging.getLogger(__name__)

DT = 0.1
VELOCITY_DECAY = 0.9
ACTION_GAIN = 0.1
CONTROL_COST = 0.01
GOAL_RADIUS = 1.0
V_CAP = 1.0
INIT_NOISE = 0.01
DEFAULT_HORIZON = 50
DEFAULT_DISCOUNT = 0.99
MAX_TASKS = 40

GOAL_TOLERANCE = 0.15
DIRECTION_TOLERANCE = 0.4
MIN_SPEED = 0.1
VELOCITY_TOLERANCE = 0.3

MANIFEST_HEADER = ["family", "mode", "index", "param", "threshold", "horizon"]


class TaskFamily(str, Enum):
    POINT_GOAL = "point_goal"
    POINT_DIRECTION = "point_direction"
    CHAIN_VELOCITY = "chain_velocity"


class SequenceMode(str, Enum):
    STATIONARY = "stationary"
    NONSTATIONARY = "nonstationary"


DEFAULT_THRESHOLDS = {
    TaskFamily.POINT_GOAL: 0.3,
    TaskFamily.POINT_DIRECTION: 0.5,
    TaskFamily.CHAIN_VELOCITY: 0.45,
}

STATE_DIMS = {TaskFamily.POINT_GOAL: 4, TaskFamily.POINT_DIRECTION: 4, TaskFamily.CHAIN_VELOCITY: 1}
ACTION_DIMS = {TaskFamily.POINT_GOAL: 2, TaskFamily.POINT_DIRECTION: 2, TaskFamily.CHAIN_VELOCITY: 1}


@dataclass(frozen=True)
class TaskSpec:
    """One MDP of a family. `param` is an angle in radians or a target velocity."""
    family: TaskFamily
    param: float
    horizon: int = DEFAULT_HORIZON
    success_threshold: Optional[float] = None
    discount: float = DEFAULT_DISCOUNT
    index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", TaskFamily(self.family))
        object.__setattr__(self, "param", float(self.param))
        if self.success_threshold is None:
            object.__setattr__(self, "success_threshold", DEFAULT_THRESHOLDS[self.family])
        if self.family == TaskFamily.CHAIN_VELOCITY:
            if abs(self.param) > V_CAP + 1e-12:
                raise ValueError(f"Target velocity {self.param} outside [-{V_CAP}, {V_CAP}]")
        elif not -math.pi - 1e-12 <= self.param <= math.pi + 1e-12:
            raise ValueError(f"Angle {self.param} outside [-pi, pi]")
        if self.horizon < 1:
            raise ValueError(f"Horizon must be >= 1, got {self.horizon}")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"Discount must be in (0, 1], got {self.discount}")
        # 0 is accepted as a test hook: every batch counts as solved.
        if not 0.0 <= self.success_threshold <= 1.0:
            raise ValueError(f"Success threshold must be in [0, 1], got {self.success_threshold}")

    @property
    def state_dim(self) -> int:
        return STATE_DIMS[self.family]

    @property
    def action_dim(self) -> int:
        return ACTION_DIMS[self.family]

    @property
    def goal(self) -> np.ndarray:
        """Goal position, goal heading unit vector, or target velocity."""
        if self.family == TaskFamily.CHAIN_VELOCITY:
            return np.array([self.param])
        unit = np.array([math.cos(self.param), math.sin(self.param)])
        return GOAL_RADIUS * unit if self.family == TaskFamily.POINT_GOAL else unit


@dataclass
class Trajectory:
    """
    One episode stored column-wise: row t holds (s_t, a_t, r_t, log pi'(a_t|s_t), done_t).

    The behavior log-probability is the one recorded when the action was
    sampled, i.e. the denominator of every later importance ratio.
    next_states[t] is s_{t+1}, the state a_t led to.
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_log_probs: np.ndarray
    dones: np.ndarray
    task_id: int
    next_states: Optional[np.ndarray] = None
    return_: float = field(init=False)

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float64).reshape(len(self.rewards), -1)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(len(self.rewards), -1)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.behavior_log_probs = np.asarray(self.behavior_log_probs, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        n = self.rewards.shape[0]
        if not (self.behavior_log_probs.shape[0] == self.dones.shape[0] == n):
            raise ValueError("Trajectory columns have different lengths")
        if self.next_states is not None:
            self.next_states = np.asarray(self.next_states, dtype=np.float64).reshape(n, -1)
            if self.next_states.shape != self.states.shape:
                raise ValueError("next_states must match the shape of states")
        self.task_id = int(self.task_id)
        self.return_ = float(np.sum(self.rewards))

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def reached_states(self) -> np.ndarray:
        """States after each action; the visited states when next_states were not kept."""
        return self.states if self.next_states is None else self.next_states


def reset(task: TaskSpec, rng: np.random.Generator, noise_std: float = INIT_NOISE,
          size: Optional[int] = None) -> np.ndarray:
    """Initial state(s): small Gaussian noise on position (or velocity), zero velocity."""
    shape = (size,) if size is not None else ()
    if task.family == TaskFamily.CHAIN_VELOCITY:
        return rng.normal(0.0, noise_std, size=shape + (1,))
    position = rng.normal(0.0, noise_std, size=shape + (2,))
    return np.concatenate([position, np.zeros(shape + (2,))], axis=-1)


def reward_bound(task: TaskSpec) -> float:
    """Largest |reward| reachable from a reset state within the horizon."""
    control = CONTROL_COST * task.action_dim
    if task.family == TaskFamily.POINT_GOAL:
        return GOAL_RADIUS + 1.0 + DT * math.sqrt(2.0) * task.horizon + control
    if task.family == TaskFamily.POINT_DIRECTION:
        return math.sqrt(2.0) + 1.0 + control
    return V_CAP + 1.0 + ACTION_GAIN * task.horizon + control


def step(task: TaskSpec, state: np.ndarray, action: np.ndarray,
         t: int = 0) -> Tuple[np.ndarray, np.ndarray, bool]:
    """
    Advance one (or a batch of) state(s) by one control step.

    Args:
        task: Task being simulated
        state: State vector or (batch, state_dim) array
        action: Raw policy action(s); clipped to [-1, 1] here
        t: Index of this step within the episode (done when t + 1 == horizon)

    Returns:
        Tuple of (next_state, reward, done)
    """
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise NumericalAbort(f"Non-finite state in task {task.index} ({task.family.value}) at step {t}")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    control = CONTROL_COST * np.sum(a * a, axis=-1)
    if task.family == TaskFamily.CHAIN_VELOCITY:
        next_state = state + ACTION_GAIN * a
        reward = -np.abs(next_state[..., 0] - task.param) - control
    else:
        velocity = VELOCITY_DECAY * state[..., 2:] + ACTION_GAIN * a
        position = state[..., :2] + DT * velocity
        next_state = np.concatenate([position, velocity], axis=-1)
        if task.family == TaskFamily.POINT_GOAL:
            reward = -np.linalg.norm(position - task.goal, axis=-1) - control
        else:
            reward = velocity @ task.goal - control
    if np.any(np.abs(reward) > reward_bound(task)):
        raise NumericalAbort(
            f"Reward {reward} exceeds bound {reward_bound(task):.3f} in task {task.index} at step {t}"
        )
    return next_state, reward, t + 1 >= task.horizon


def success_flags(task: TaskSpec, states: np.ndarray) -> np.ndarray:
    """Per-step success indicator for the given states."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if task.family == TaskFamily.POINT_GOAL:
        return np.linalg.norm(states[:, :2] - task.goal, axis=-1) < GOAL_TOLERANCE
    if task.family == TaskFamily.POINT_DIRECTION:
        velocity = states[:, 2:]
        speed = np.linalg.norm(velocity, axis=-1)
        heading = velocity / np.maximum(speed, 1e-12)[:, None]
        aligned = np.linalg.norm(heading - task.goal, axis=-1) < DIRECTION_TOLERANCE
        return aligned & (speed > MIN_SPEED)
    return np.abs(states[:, 0] - task.param) < VELOCITY_TOLERANCE * abs(task.param)


def success(task: TaskSpec, trajectory: Trajectory, per_trajectory: bool = False) -> float:
    """
    Fraction of steps whose resulting state s_{t+1} is in-threshold, or 1/0
    for "any step succeeded" when per_trajectory.
    """
    flags = success_flags(task, trajectory.reached_states)
    if per_trajectory:
        return float(np.any(flags))
    return float(np.mean(flags))


def batch_success(task: TaskSpec, trajectories: Sequence[Trajectory],
                  per_trajectory: bool = False) -> float:
    """Success averaged over every sample of a batch (or over trajectories)."""
    if not trajectories:
        return 0.0
    if per_trajectory:
        return float(np.mean([success(task, tr, per_trajectory=True) for tr in trajectories]))
    hits = sum(int(np.sum(success_flags(task, tr.reached_states))) for tr in trajectories)
    return hits / sum(len(tr) for tr in trajectories)


def _schedule_param(family: TaskFamily, k: int) -> float:
    """k-th entry of the fixed alternating task schedule."""
    pair, odd = divmod(k, 2)
    if family == TaskFamily.CHAIN_VELOCITY:
        v = round(0.14 + 0.14 * pair, 2) if odd else round(-2.66 + 0.14 * pair, 2)
        return velocity_to_desk(v, V_CAP)
    degrees = 9 + 9 * pair if odd else -171 + 9 * pair
    return deg_to_rad(degrees)


def make_sequence(family: TaskFamily, mode: SequenceMode, n_tasks: int,
                  rng: Union[int, np.random.Generator, None] = 0,
                  horizon: int = DEFAULT_HORIZON, discount: float = DEFAULT_DISCOUNT,
                  success_threshold: Optional[float] = None) -> List[TaskSpec]:
    """
    Build a task sequence.

    Nonstationary mode returns the first n_tasks entries of the alternating
    schedule (-171deg, 9deg, -162deg, 18deg, ... or the matching velocity list);
    stationary mode returns the same tasks in a seed-shuffled order.
    """
    family = TaskFamily(family)
    mode = SequenceMode(mode)
    if not 1 <= n_tasks <= MAX_TASKS:
        raise ValueError(f"n_tasks must be in [1, {MAX_TASKS}], got {n_tasks}")
    params = [_schedule_param(family, k) for k in range(n_tasks)]
    if mode == SequenceMode.STATIONARY:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        params = [params[i] for i in gen.permutation(n_tasks)]
    return [
        TaskSpec(family, p, horizon=horizon, success_threshold=success_threshold,
                 discount=discount, index=i)
        for i, p in enumerate(params)
    ]


def sequence_to_manifest(tasks: Sequence[TaskSpec], mode: SequenceMode) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for task in tasks:
        writer.writerow([task.family.value, SequenceMode(mode).value, task.index,
                         repr(task.param), repr(task.success_threshold), task.horizon])
    return out.getvalue()


def sequence_from_manifest(text: str, discount: float = DEFAULT_DISCOUNT) -> Tuple[List[TaskSpec], SequenceMode]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("Task manifest has no rows")
    tasks = [
        TaskSpec(TaskFamily(row["family"]), float(row["param"]), horizon=int(row["horizon"]),
                 success_threshold=float(row["threshold"]), discount=discount, index=int(row["index"]))
        for row in rows
    ]
    return tasks, SequenceMode(rows[0]["mode"])


def rollout_batch(task: TaskSpec, policy: GaussianPolicyHead, n: int, rng: np.random.Generator,
                  task_id: Optional[int] = None, noise_std: float = INIT_NOISE) -> List[Trajectory]:
    """Simulate n episodes in lockstep under the policy, recording behavior log-probs."""
    if policy.state_dim != task.state_dim or policy.action_dim != task.action_dim:
        raise ValueError(
            f"Policy dims ({policy.state_dim}, {policy.action_dim}) do not match task "
            f"({task.state_dim}, {task.action_dim})"
        )
    T = task.horizon
    states = np.empty((T, n, task.state_dim))
    next_states = np.empty((T, n, task.state_dim))
    actions = np.empty((T, n, task.action_dim))
    rewards = np.empty((T, n))
    log_probs = np.empty((T, n))
    dones = np.zeros((T, n), dtype=bool)
    s = reset(task, rng, noise_std=noise_std, size=n)
    for t in range(T):
        a, lp = sample_action(policy, s, rng)
        s_next, r, done = step(task, s, a, t)
        states[t], next_states[t], actions[t], rewards[t], log_probs[t] = s, s_next, a, r, lp
        dones[t] = done
        s = s_next
    task_id = task.index if task_id is None else task_id
    return [
        Trajectory(states[:, i], actions[:, i], rewards[:, i], log_probs[:, i], dones[:, i], task_id,
                   next_states=next_states[:, i])
        for i in range(n)
    ]


def evaluate_policy(task: TaskSpec, policy: GaussianPolicyHead, n: int,
                    rng: np.random.Generator) -> Tuple[float, float]:
    """Evaluation-only rollouts; returns (mean return, batch success). Nothing is stored."""
    trajectories = rollout_batch(task, policy, n, rng)
    return float(np.mean([tr.return_ for tr in trajectories])), batch_success(task, trajectories)
