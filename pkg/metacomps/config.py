"""
Experiment configuration: dataclasses with documented defaults and the
sectioned key=value text format they are read from and written to.

Grammar (one item per line):

    # comment                 ignored, also after a value
    [section]                 following bare keys belong to this section
    key = value               key inside the current section
    section.key = value       explicit section, any position

Sections: experiment, policy, ppo, vtrace, meta. Bare keys before any
header belong to `experiment`. Lists are comma-separated, `none` clears
an optional value, booleans are true/false.
"""

from __future__ import annotations

import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from .envs import DEFAULT_DISCOUNT, DEFAULT_HORIZON, MAX_TASKS, SequenceMode, TaskFamily
from .errors import ConfigError, require
from .meta import MetaConfig
from .ppo import PpoConfig
from .vtrace import VtraceConfig

logger = logging.getLogger(__name__)

PROTOCOLS = ("until_success", "fixed_budget")


class LearnerKind(str, Enum):
    COMPS = "comps"
    PPO_TL = "ppotl"
    COMPS_NO_VTRACE = "novtrace"

    @property
    def meta_learns(self) -> bool:
        return self is not LearnerKind.PPO_TL


@dataclass
class PolicyConfig:
    hidden_dims: Tuple[int, ...] = (128, 64)
    value_hidden_dims: Tuple[int, ...] = (64, 64)
    init_std: float = 0.5

    def __post_init__(self) -> None:
        require(len(self.hidden_dims) >= 1 and all(h >= 1 for h in self.hidden_dims),
                "policy.hidden_dims", self.hidden_dims, "one or more positive sizes")
        require(len(self.value_hidden_dims) >= 1 and all(h >= 1 for h in self.value_hidden_dims),
                "policy.value_hidden_dims", self.value_hidden_dims, "one or more positive sizes")
        require(self.init_std > 0.0, "policy.init_std", self.init_std, "> 0")


@dataclass
class ExperimentConfig:
    family: TaskFamily = TaskFamily.POINT_DIRECTION
    mode: SequenceMode = SequenceMode.STATIONARY
    n_tasks: int = 10
    learners: Tuple[LearnerKind, ...] = (LearnerKind.COMPS, LearnerKind.PPO_TL)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    output_dir: str = "comps_output"
    protocol: str = "until_success"
    horizon: int = DEFAULT_HORIZON
    discount: float = DEFAULT_DISCOUNT
    success_threshold: Optional[float] = None
    eval_trajectories: int = 10
    backward_ks: Tuple[int, ...] = (1, 2, 3, 4, 5)
    skilled_size: int = 20
    offpolicy_cap: int = 100
    retention_fraction: float = 0.05
    retention_mode: str = "last"
    checkpoints: bool = True
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    vtrace: VtraceConfig = field(default_factory=VtraceConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)

    def __post_init__(self) -> None:
        require(1 <= self.n_tasks <= MAX_TASKS, "experiment.n_tasks", self.n_tasks, f"[1, {MAX_TASKS}]")
        require(len(self.learners) >= 1, "experiment.learners", self.learners, "non-empty list")
        require(len(self.seeds) >= 1, "experiment.seeds", self.seeds, "non-empty list")
        require(len(set(self.seeds)) == len(self.seeds), "experiment.seeds", self.seeds, "distinct values")
        require(all(s >= 0 for s in self.seeds), "experiment.seeds", self.seeds, "non-negative integers")
        require(self.protocol in PROTOCOLS, "experiment.protocol", self.protocol, " | ".join(PROTOCOLS))
        require(self.horizon >= 1, "experiment.horizon", self.horizon, ">= 1")
        require(0.0 < self.discount <= 1.0, "experiment.discount", self.discount, "(0, 1]")
        if self.success_threshold is not None:
            require(0.0 <= self.success_threshold <= 1.0, "experiment.success_threshold",
                    self.success_threshold, "[0, 1] or none")
        require(self.eval_trajectories >= 1, "experiment.eval_trajectories", self.eval_trajectories, ">= 1")
        require(all(k >= 1 for k in self.backward_ks), "experiment.backward_ks", self.backward_ks,
                "positive integers")
        require(self.skilled_size >= 1, "experiment.skilled_size", self.skilled_size, ">= 1")
        require(self.offpolicy_cap >= 1, "experiment.offpolicy_cap", self.offpolicy_cap, ">= 1")
        require(0.0 < self.retention_fraction <= 1.0, "experiment.retention_fraction",
                self.retention_fraction, "(0, 1]")
        require(self.retention_mode in ("last", "uniform"), "experiment.retention_mode",
                self.retention_mode, "last | uniform")

    @property
    def until_success(self) -> bool:
        return self.protocol == "until_success"


SECTIONS: Dict[str, type] = {
    "experiment": ExperimentConfig,
    "policy": PolicyConfig,
    "ppo": PpoConfig,
    "vtrace": VtraceConfig,
    "meta": MetaConfig,
}


def _scalar_fields(cls: type) -> Dict[str, Any]:
    """Field name -> resolved type, excluding nested section configs."""
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in SECTIONS}


def _coerce(key: str, raw: str, tp: Any) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    text = raw.strip()

    if origin is typing.Union and type(None) in args:
        if text.lower() == "none":
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(key, text, inner)
    if origin is tuple:
        item_type = args[0]
        if not text:
            return ()
        return tuple(_coerce(key, part, item_type) for part in text.split(","))
    if origin is typing.Literal:
        if text not in args:
            raise ConfigError(f"{key}={text!r} is invalid; allowed: {' | '.join(map(str, args))}")
        return text
    if tp is bool:
        lowered = text.lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{key}={text!r} is invalid; allowed: true | false")
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(text)
        except ValueError:
            allowed = " | ".join(m.value for m in tp)
            raise ConfigError(f"{key}={text!r} is invalid; allowed: {allowed}") from None
    if tp is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}={text!r} is invalid; allowed: an integer") from None
    if tp is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}={text!r} is invalid; allowed: a real number") from None
    return text


def parse_config(text: str) -> ExperimentConfig:
    """Parse the sectioned key=value format; omitted keys take their defaults, unknown keys are rejected."""
    values: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    section = "experiment"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]; allowed: {', '.join(SECTIONS)}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        target = section
        if "." in key:
            target, key = key.split(".", 1)
            if target not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {target!r}; allowed: {', '.join(SECTIONS)}")
        fields = _scalar_fields(SECTIONS[target])
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {target}.{key}")
        values[target][key] = _coerce(f"{target}.{key}", raw, fields[key])

    subs = {name: SECTIONS[name](**values[name]) for name in SECTIONS if name != "experiment"}
    cfg = ExperimentConfig(**values["experiment"], **subs)
    logger.debug(f"Parsed config: {cfg}")
    return cfg


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render every key of every section; parse_config(serialize_config(c)) == c."""
    lines: List[str] = []
    for name, cls in SECTIONS.items():
        obj = cfg if name == "experiment" else getattr(cfg, name)
        lines.append(f"[{name}]")
        for key in _scalar_fields(cls):
            lines.append(f"{key} = {_render(getattr(obj, key))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
