"""
Per-task experience: the skilled set D*_i and the retained off-policy set D_i.

Each record_batch call is one RL episode. Recording is forward-only: once a
task is finalized, or a later task has started recording, it can never be
written again.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .envs import Trajectory
from .errors import ProtocolViolation

EXPERIENCE_MAGIC = b"CMPSEXP2"

RetentionMode = Literal["last", "uniform"]


class EmptyBufferError(ValueError):
    """Sampling from a buffer that holds nothing for the task."""


@dataclass
class ExperienceStore:
    skilled_size: int = 20
    offpolicy_cap: int = 100
    retention_fraction: float = 0.05
    retention_mode: RetentionMode = "last"

    skilled: Dict[int, List[Trajectory]] = field(default_factory=dict)
    offpolicy: Dict[int, List[Trajectory]] = field(default_factory=dict)
    episode_counts: Dict[int, int] = field(default_factory=dict)
    events: List[Tuple[str, int]] = field(default_factory=list)

    _staging: Dict[int, List[List[Trajectory]]] = field(default_factory=dict, repr=False)
    _skilled_keys: Dict[int, List[Tuple[float, int]]] = field(default_factory=dict, repr=False)
    _finalized: set = field(default_factory=set, repr=False)
    _arrivals: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        self.logger = logging.getLogger(__name__)

    @property
    def finalized_tasks(self) -> List[int]:
        return sorted(self._finalized)

    def record_batch(self, task_id: int, trajectories: Sequence[Trajectory]) -> None:
        """Stage one episode's trajectories and update the running top-k skilled set."""
        if task_id in self._finalized:
            raise ProtocolViolation(f"Task {task_id} is finalized; it can never be recorded again")
        later = [t for t in self.episode_counts if t > task_id]
        if later:
            raise ProtocolViolation(f"Task {task_id} recorded after later task {max(later)} started")
        open_earlier = [t for t in self.episode_counts if t < task_id and t not in self._finalized]
        if open_earlier:
            raise ProtocolViolation(f"Task {task_id} started before task {open_earlier[0]} was finalized")
        for tr in trajectories:
            if tr.task_id != task_id:
                raise ValueError(f"Trajectory of task {tr.task_id} recorded under task {task_id}")
            if not np.all(np.isfinite(tr.behavior_log_probs)):
                raise ValueError(f"Trajectory for task {task_id} has non-finite behavior log-probs")

        self._staging.setdefault(task_id, []).append(list(trajectories))
        self.episode_counts[task_id] = self.episode_counts.get(task_id, 0) + 1
        self.events.append(("record", task_id))

        # Ranked by return (descending), ties by earlier arrival.
        ranked = list(zip(self._skilled_keys.get(task_id, []), self.skilled.get(task_id, [])))
        for tr in trajectories:
            ranked.append(((-tr.return_, self._arrivals), tr))
            self._arrivals += 1
        ranked.sort(key=lambda item: item[0])
        ranked = ranked[:self.skilled_size]
        self._skilled_keys[task_id] = [key for key, _ in ranked]
        self.skilled[task_id] = [tr for _, tr in ranked]

    def retained_episode_count(self, episodes_used: int, episode_budget: int) -> int:
        """k = min(M, ceil(fraction * N_cap))."""
        return min(episodes_used, math.ceil(self.retention_fraction * episode_budget))

    def finalize_task(self, task_id: int, episode_budget: int, rng: np.random.Generator,
                      episodes_used: Optional[int] = None) -> None:
        """
        Close a task: keep k episodes of staged data, then subsample at most
        offpolicy_cap trajectories into the off-policy buffer.

        Args:
            task_id: Task being closed
            episode_budget: N_cap, the per-task episode budget
            rng: Seeded stream for the subsample
            episodes_used: M; defaults to the number of recorded episodes. Only
                the first M episodes are eligible for retention.
        """
        if task_id in self._finalized:
            raise ProtocolViolation(f"Task {task_id} was already finalized")
        episodes = self._staging.get(task_id)
        if not episodes:
            raise ProtocolViolation(f"Task {task_id} has no staged experience to finalize")

        m = len(episodes) if episodes_used is None else min(episodes_used, len(episodes))
        window = episodes[:m]
        k = self.retained_episode_count(m, episode_budget)
        if self.retention_mode == "last":
            kept_episodes = window[len(window) - k:] if k > 0 else []
        else:
            picks = np.sort(rng.choice(len(window), size=min(k, len(window)), replace=False))
            kept_episodes = [window[i] for i in picks]
        pool = [tr for ep in kept_episodes for tr in ep]
        if len(pool) > self.offpolicy_cap:
            picks = np.sort(rng.choice(len(pool), size=self.offpolicy_cap, replace=False))
            pool = [pool[i] for i in picks]

        self.offpolicy[task_id] = pool
        self._finalized.add(task_id)
        del self._staging[task_id]
        self.events.append(("finalize", task_id))
        self.logger.info(
            f"Finalized task {task_id}: M={m}, k={k} episodes retained, "
            f"{len(pool)} off-policy trajectories, {len(self.skilled.get(task_id, []))} skilled"
        )

    def sample_offpolicy(self, task_id: int, m: int, rng: np.random.Generator) -> List[Trajectory]:
        """m trajectories drawn uniformly with replacement from D_task."""
        pool = self.offpolicy.get(task_id, [])
        if not pool:
            raise EmptyBufferError(f"Off-policy buffer for task {task_id} is empty")
        return [pool[i] for i in rng.integers(0, len(pool), size=m)]

    def sample_skilled(self, task_id: int, rng: np.random.Generator,
                       m: Optional[int] = None) -> List[Trajectory]:
        """The whole skilled set by default; otherwise m of them (without replacement when possible)."""
        pool = self.skilled.get(task_id, [])
        if not pool:
            raise EmptyBufferError(f"Skilled buffer for task {task_id} is empty")
        if m is None:
            return list(pool)
        picks = rng.choice(len(pool), size=m, replace=m > len(pool))
        return [pool[i] for i in picks]


def _trajectory_to_bytes(tr: Trajectory) -> bytes:
    n, state_dim = tr.states.shape
    action_dim = tr.actions.shape[1]
    table = np.column_stack([
        tr.states, tr.actions, tr.rewards, tr.behavior_log_probs, tr.dones.astype(np.float64), tr.reached_states
    ])
    header = struct.pack("<iIII", tr.task_id, n, state_dim, action_dim) + struct.pack("<d", tr.return_)
    return header + table.astype("<f8").tobytes()


def _trajectory_from_bytes(blob: bytes, offset: int) -> Tuple[Trajectory, int]:
    task_id, n, state_dim, action_dim = struct.unpack_from("<iIII", blob, offset)
    offset += 16
    (stored_return,) = struct.unpack_from("<d", blob, offset)
    offset += 8
    width = 2 * state_dim + action_dim + 3
    table = np.frombuffer(blob, dtype="<f8", count=n * width, offset=offset).astype(np.float64)
    table = table.reshape(n, width)
    tr = Trajectory(
        states=table[:, :state_dim],
        actions=table[:, state_dim:state_dim + action_dim],
        rewards=table[:, state_dim + action_dim],
        behavior_log_probs=table[:, state_dim + action_dim + 1],
        dones=table[:, state_dim + action_dim + 2] != 0.0,
        task_id=task_id,
        next_states=table[:, state_dim + action_dim + 3:],
    )
    if tr.return_ != stored_return:
        raise ValueError(f"Corrupt experience file: return mismatch for task {task_id}")
    return tr, offset + 8 * n * width


def save_store(store: ExperienceStore, path: Path, manifest_ref: str, seed: int) -> None:
    """
    Write finalized experience: header (manifest reference, seed), then for
    each task its episode count, skilled and off-policy trajectories.
    Staged (unfinalized) data is not written.
    """
    ref = manifest_ref.encode("utf-8")
    blob = bytearray(EXPERIENCE_MAGIC)
    blob += struct.pack("<I", len(ref)) + ref + struct.pack("<q", seed)
    tasks = sorted(set(store.skilled) | set(store.offpolicy))
    blob += struct.pack("<I", len(tasks))
    for task_id in tasks:
        skilled = store.skilled.get(task_id, [])
        offpolicy = store.offpolicy.get(task_id, [])
        blob += struct.pack("<iIB", task_id, store.episode_counts.get(task_id, 0),
                            int(task_id in store.finalized_tasks))
        blob += struct.pack("<I", len(skilled))
        for tr in skilled:
            blob += _trajectory_to_bytes(tr)
        blob += struct.pack("<I", len(offpolicy))
        for tr in offpolicy:
            blob += _trajectory_to_bytes(tr)
    Path(path).write_bytes(bytes(blob))
    logging.getLogger(__name__).info(f"Experience file written: {path} ({len(tasks)} tasks)")


def load_store(path: Path) -> Tuple[ExperienceStore, str, int]:
    """Read an experience file back; returns (store, manifest reference, seed)."""
    blob = Path(path).read_bytes()
    if blob[:8] != EXPERIENCE_MAGIC:
        raise ValueError(f"Not an experience file: {path}")
    offset = 8
    (ref_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    manifest_ref = blob[offset:offset + ref_len].decode("utf-8")
    offset += ref_len
    (seed,) = struct.unpack_from("<q", blob, offset)
    offset += 8
    (n_tasks,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    store = ExperienceStore()
    for _ in range(n_tasks):
        task_id, count, finalized = struct.unpack_from("<iIB", blob, offset)
        offset += struct.calcsize("<iIB")
        for target in (store.skilled, store.offpolicy):
            (n,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            items = []
            for _ in range(n):
                tr, offset = _trajectory_from_bytes(blob, offset)
                items.append(tr)
            target[task_id] = items
        store.episode_counts[task_id] = count
        store._skilled_keys[task_id] = [(-tr.return_, i) for i, tr in enumerate(store.skilled[task_id])]
        if finalized:
            store._finalized.add(task_id)
    return store, manifest_ref, seed
