"""
Meta-training between tasks: for every stored task, adapt theta with one
off-policy inner step, then move theta so the adapted policy imitates the
task's skilled trajectories.

The outer gradient is first-order: grad_theta L_BC(phi_j) is approximated by
grad_phi L_BC evaluated at phi_j.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .buffer import EmptyBufferError, ExperienceStore
from .envs import Trajectory
from .errors import require
from .nn import AdamState, GaussianPolicyHead, ParamVector, adam_step, log_prob, log_prob_grad
from .vtrace import VtraceConfig, fit_value, inner_adapt, offpolicy_pg

logger = logging.getLogger(__name__)

OuterOptimizer = Literal["sgd", "adam"]

HARD_INNER_LR = 0.0025


@dataclass
class MetaConfig:
    n_meta: int = 25
    inner_lr: float = 0.005
    outer_lr: float = 0.005
    m_inner: int = 20
    bc_steps_per_task: int = 5
    warm_start: bool = True
    adapt_log_std: bool = True
    sequential: bool = True
    outer_optimizer: OuterOptimizer = "sgd"
    second_order: bool = False

    def __post_init__(self) -> None:
        # 0 is accepted for the degenerate no-op runs.
        require(self.n_meta >= 0, "meta.n_meta", self.n_meta, ">= 0")
        require(self.inner_lr >= 0.0, "meta.inner_lr", self.inner_lr, ">= 0")
        require(self.outer_lr >= 0.0, "meta.outer_lr", self.outer_lr, ">= 0")
        require(self.m_inner >= 1, "meta.m_inner", self.m_inner, ">= 1")
        require(self.bc_steps_per_task >= 1, "meta.bc_steps_per_task", self.bc_steps_per_task, ">= 1")
        require(self.outer_optimizer in ("sgd", "adam"), "meta.outer_optimizer", self.outer_optimizer,
                "sgd | adam")
        require(not self.second_order, "meta.second_order", self.second_order,
                "false (second-order outer gradients are not implemented)")

    @classmethod
    def hard(cls, **overrides) -> "MetaConfig":
        """Preset for the harder task families: half the default inner rate."""
        overrides.setdefault("inner_lr", HARD_INNER_LR)
        return cls(**overrides)


@dataclass
class MetaDiagnostics:
    iteration: int
    mean_bc_loss: float
    mean_inner_grad_norm: float
    tasks_used: int


@dataclass
class MetaOutcome:
    policy: GaussianPolicyHead
    diagnostics: List[MetaDiagnostics] = field(default_factory=list)
    skipped_tasks: int = 0


def _pairs(trajectories: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([tr.states for tr in trajectories]),
            np.concatenate([tr.actions for tr in trajectories]))


def bc_loss(policy: GaussianPolicyHead, states: np.ndarray, actions: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood of (s, a) pairs and its gradient w.r.t. the policy vector."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    if states.shape[0] == 0:
        raise ValueError("bc_loss needs a non-empty dataset")
    n = states.shape[0]
    loss = -float(np.mean(log_prob(policy, states, actions)))
    grad = log_prob_grad(policy, states, actions, np.full(n, -1.0 / n))
    return loss, grad


class _OuterStepper:
    """theta <- theta - beta * g, either plain or with Adam moments kept across the call."""

    def __init__(self, cfg: MetaConfig, size: int) -> None:
        self.cfg = cfg
        self.adam = AdamState.zeros(size) if cfg.outer_optimizer == "adam" else None

    def __call__(self, theta: GaussianPolicyHead, grad: np.ndarray) -> GaussianPolicyHead:
        if self.adam is None:
            return theta.with_vector(theta.to_vector() - self.cfg.outer_lr * grad)
        vec, self.adam = adam_step(theta.to_vector(), grad, self.adam, self.cfg.outer_lr)
        return theta.with_vector(vec)


def meta_train(policy_init: GaussianPolicyHead, value: ParamVector, store: ExperienceStore,
               task_ids: Sequence[int], cfg: MetaConfig, vtrace_cfg: VtraceConfig,
               rng: np.random.Generator) -> MetaOutcome:
    """
    Run cfg.n_meta passes over the stored tasks in order.

    Per task visit: draw D_tr (m_inner off-policy trajectories) and D_val (the
    skilled set), then bc_steps_per_task times adapt phi from the current
    theta on D_tr and step theta along grad_phi L_BC(phi, D_val). With
    sequential=False the per-task gradients are averaged into one step per
    pass instead. Tasks lacking skilled or off-policy data are skipped.
    """
    theta = policy_init.copy()
    stepper = _OuterStepper(cfg, theta.size)
    diagnostics: List[MetaDiagnostics] = []
    skipped = 0
    if cfg.outer_lr == 0.0:
        return MetaOutcome(theta, diagnostics, skipped)

    for iteration in range(1, cfg.n_meta + 1):
        losses: List[float] = []
        norms: List[float] = []
        batch_grads: List[np.ndarray] = []
        for task_id in task_ids:
            try:
                d_train = store.sample_offpolicy(task_id, cfg.m_inner, rng)
                d_val = store.sample_skilled(task_id, rng)
            except EmptyBufferError as e:
                skipped += 1
                logger.warning(f"Meta iteration {iteration}: skipping task {task_id} ({e})")
                continue
            task_value = value
            if vtrace_cfg.refit_value_each_iteration:
                task_value = fit_value(value, d_train, theta, vtrace_cfg,
                                       vtrace_cfg.value_fit_steps, vtrace_cfg.value_fit_lr)
            states, actions = _pairs(d_val)
            if cfg.inner_lr > 0.0:
                norms.append(float(np.linalg.norm(offpolicy_pg(theta, task_value, d_train, vtrace_cfg))))

            if cfg.sequential:
                for _ in range(cfg.bc_steps_per_task):
                    phi = inner_adapt(theta, task_value, d_train, cfg.inner_lr, vtrace_cfg, cfg.adapt_log_std)
                    loss, grad = bc_loss(phi, states, actions)
                    theta = stepper(theta, grad)
                losses.append(loss)
            else:
                phi = inner_adapt(theta, task_value, d_train, cfg.inner_lr, vtrace_cfg, cfg.adapt_log_std)
                loss, grad = bc_loss(phi, states, actions)
                batch_grads.append(grad)
                losses.append(loss)

        if not cfg.sequential and batch_grads:
            for _ in range(cfg.bc_steps_per_task):
                theta = stepper(theta, np.mean(batch_grads, axis=0))

        diag = MetaDiagnostics(
            iteration,
            float(np.mean(losses)) if losses else float("nan"),
            float(np.mean(norms)) if norms else 0.0,
            len(losses),
        )
        diagnostics.append(diag)
        logger.debug(f"Meta iteration {iteration}: BC loss {diag.mean_bc_loss:.4f}, "
                     f"inner grad norm {diag.mean_inner_grad_norm:.4f}, tasks {diag.tasks_used}")

    return MetaOutcome(theta, diagnostics, skipped)


def meta_init_for_task(prev_final: Optional[GaussianPolicyHead], theta_meta: Optional[GaussianPolicyHead],
                       cfg: MetaConfig,
                       fresh: Optional[Callable[[], GaussianPolicyHead]] = None) -> GaussianPolicyHead:
    """
    Starting point of a meta-training round: the policy just trained on the
    latest task when warm_start is on, otherwise the previous meta solution.
    With neither available a fresh initialization is drawn.
    """
    if cfg.warm_start and prev_final is not None:
        return prev_final.copy()
    if theta_meta is not None:
        return theta_meta.copy()
    if fresh is None:
        raise ValueError("No previous policy available and no fresh initializer given")
    return fresh()


def mean_adapted_bc_gap(policy: GaussianPolicyHead, value: ParamVector, store: ExperienceStore,
                        task_ids: Sequence[int], cfg: MetaConfig, vtrace_cfg: VtraceConfig,
                        rng: np.random.Generator) -> Tuple[float, float]:
    """Mean BC loss on skilled data before and after one inner adaptation, over tasks."""
    before, after = [], []
    for task_id in task_ids:
        states, actions = _pairs(store.sample_skilled(task_id, rng))
        d_train = store.sample_offpolicy(task_id, cfg.m_inner, rng)
        phi = inner_adapt(policy, value, d_train, cfg.inner_lr, vtrace_cfg, cfg.adapt_log_std)
        before.append(bc_loss(policy, states, actions)[0])
        after.append(bc_loss(phi, states, actions)[0])
    return float(np.mean(before)), float(np.mean(after))
