from __future__ import annotations

from typing import Any


class HarmonizError(Exception):
    """Base class for every error raised by harmoniz."""


class ParameterError(HarmonizError, ValueError):
    """Raised when a scalar parameter is outside its valid range."""


class ShapeError(HarmonizError, ValueError):
    """Raised when tensor shapes are incompatible."""

    def __init__(self, message: str, hint: str | None = None):
        self.hint = hint
        super().__init__(f"{message} ({hint})" if hint else message)


class ContractError(HarmonizError):
    """Raised when an operation is called outside its contract."""


class NumericError(HarmonizError, ArithmeticError):
    """Raised when a computation produces NaN or Inf."""

    def __init__(self, message: str, step: int | None = None, last_finite: Any = None):
        self.step = step
        self.last_finite = last_finite
        super().__init__(message)


class TrainingError(NumericError):
    """Raised when toy training diverges."""

    def __init__(
        self,
        message: str,
        epoch: int,
        last_finite: dict[str, Any] | None,
        loss_trace: list[float],
    ):
        self.epoch = epoch
        self.loss_trace = loss_trace
        super().__init__(message, step=epoch, last_finite=last_finite)


class ConfigError(HarmonizError):
    """Raised when a configuration file or field is invalid."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
