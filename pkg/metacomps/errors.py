"""
Exception types shared across the engine.

The CLI maps each family to its own exit status.
"""

from __future__ import annotations

from typing import Any


class ConfigError(ValueError):
    """Invalid configuration key, type or range."""


class ProtocolViolation(RuntimeError):
    """The continual protocol was broken (revisit, double finalize, ...)."""


class NumericalAbort(ArithmeticError):
    """A run produced a non-finite or out-of-bounds quantity."""


class NonFiniteRatio(NumericalAbort):
    """A likelihood ratio overflowed or became NaN."""


def require(ok: bool, key: str, value: Any, allowed: str) -> None:
    """Raise ConfigError naming the key, value and allowed range unless ok."""
    if not ok:
        raise ConfigError(f"{key}={value!r} is invalid; allowed: {allowed}")
