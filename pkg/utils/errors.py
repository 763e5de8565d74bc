"""Exception hierarchy shared by every module."""

from __future__ import annotations

from typing import Optional, Tuple


class CCHError(RuntimeError):
    """Base for runtime failures (CLI exit code 2)."""


class InvalidInputError(CCHError, ValueError):
    """Bad shapes, non-finite inputs, malformed descriptions or poses."""


class InvalidIntervalError(InvalidInputError):
    """A sampling interval with t_n >= t_f."""


class NumericError(CCHError, ArithmeticError):
    """A non-finite intermediate value, tagged with where it appeared."""

    def __init__(self,
                 message: str,
                 *,
                 part: Optional[int] = None,
                 pixel: Optional[Tuple[int, int]] = None):
        self.part = part
        self.pixel = pixel
        where = []
        if part is not None:
            where.append(f"part={part}")
        if pixel is not None:
            where.append(f"pixel=(row {pixel[0]}, col {pixel[1]})")
        suffix = f" [{', '.join(where)}]" if where else ""
        super().__init__(f"{message}{suffix}")


class ConfigError(CCHError):
    """Unknown keys or invalid values in a run configuration."""


class CheckpointError(CCHError):
    """Unreadable, truncated, corrupted or version-mismatched checkpoint."""


class TrainingDivergedError(NumericError):
    """A loss went non-finite during training."""

    def __init__(self, step: int, losses: dict):
        self.step = step
        self.losses = dict(losses)
        terms = ", ".join(f"{k}={v!r}" for k, v in sorted(self.losses.items()))
        super().__init__(f"non-finite loss at step {step}: {terms}")
