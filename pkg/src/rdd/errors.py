"""Error taxonomy shared across the package.

CLI exit-code mapping: UsageError -> 2, ScenarioIOError -> 3,
InvariantViolation / Runaway -> 4.
"""

from __future__ import annotations


class UsageError(ValueError):
    """Caller violated a documented precondition or flag contract."""


class ScenarioIOError(OSError):
    """A scenario, corpus or config file could not be loaded."""

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class RollbackAtOrigin(UsageError):
    """Merging the window would cross the prompt boundary.

    The engine must force-decode instead of rolling back in this situation;
    seeing this exception escape a decode indicates a missing guard.
    """


class CacheMiss(LookupError):
    """A prefix block required to compose the context is not cached."""


class InvariantViolation(RuntimeError):
    """Internal consistency check failed; a bug, not bad input."""


class Runaway(InvariantViolation):
    """A decode exceeded its step cap, violating the termination bound."""
