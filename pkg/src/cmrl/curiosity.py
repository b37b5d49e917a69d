"""Intrinsic reward for experiments that improve the model's compression of
the history: a trial earns eta times the code-length reduction the sleep
phase achieved on that trial's own data."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractViolation
from .world_model import CodeLengthReport


@dataclass(frozen=True)
class CuriosityConfig:
    eta: float = 0.01
    clip_negative: bool = True
    enabled: bool = False

    def __post_init__(self):
        if self.eta < 0:
            raise ContractViolation("eta must be >= 0")


def intrinsic_reward(before: CodeLengthReport, after: CodeLengthReport, cfg: CuriosityConfig) -> float:
    """eta * (before.total - after.total), clamped at zero when configured;
    both reports must be scored on the identical span."""
    if not cfg.enabled:
        return 0.0
    if before.steps_scored != after.steps_scored:
        raise ContractViolation(
            f"reports cover different spans ({before.steps_scored} vs {after.steps_scored} steps)"
        )
    gain = cfg.eta * (before.total - after.total)
    if cfg.clip_negative:
        gain = max(0.0, gain)
    return float(gain)
