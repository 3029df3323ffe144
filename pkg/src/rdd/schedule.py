"""Dynamic confidence threshold and the dual-scale factor policy.

The acceptance threshold for unmasking is tau = 1 - f / (m + 1), where m is
the number of unresolved masks in the window. More unresolved ambiguity means
a stricter threshold; large factors mean more aggressive parallel commits.
The value is deliberately left unclamped: tau < 0 simply makes every masked
position decodable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import UsageError
from .types import Mode


@dataclass(frozen=True)
class ScheduleConfig:
    """Scheduling knobs.

    f        normal scaling factor
    f_r      recovery scaling factor, used between a rollback and the next
             completed block; must not exceed f
    lambda_  re-mask sensitivity (consumed by the remask stage)
    rollback_budget   maximum rollbacks per block chain (R)
    """

    f: float = 0.9
    f_r: float = 0.9
    lambda_: float = 1.0
    rollback_budget: int = 1

    def __post_init__(self) -> None:
        if self.f <= 0:
            raise UsageError(f"f must be positive, got {self.f}")
        if self.f_r <= 0:
            raise UsageError(f"f_r must be positive, got {self.f_r}")
        if self.f_r > self.f:
            raise UsageError(f"f_r ({self.f_r}) must not exceed f ({self.f})")
        if self.lambda_ <= 0:
            raise UsageError(f"lambda must be positive, got {self.lambda_}")
        if self.rollback_budget < 0:
            raise UsageError(f"rollback budget must be non-negative, got {self.rollback_budget}")


def threshold(f_curr: float, masked_count: int) -> float:
    """Acceptance threshold 1 - f / (m + 1); unclamped."""
    if masked_count < 0:
        raise UsageError(f"masked_count must be non-negative, got {masked_count}")
    return 1.0 - f_curr / (masked_count + 1)


def select_decodable(output, tau: float) -> list[int]:
    """Positions whose prediction confidence clears tau (inclusive), ascending."""
    return sorted(i for i, p in output.predictions.items() if p.confidence >= tau)


def current_factor(mode: Mode, cfg: ScheduleConfig) -> float:
    return cfg.f if mode is Mode.NORMAL else cfg.f_r
