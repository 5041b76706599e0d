# src/app/errors.py
from __future__ import annotations

from typing import Any


class AppError(Exception):
    """
    Base application error.

    Attributes:
        message: Human-friendly explanation.
        details: Optional machine-friendly context (dict/str).
        exit_code: Process exit code the CLI returns for this error.
        code: Stable, snake_case application code (e.g., 'config_error').
        expose: If False, we’ll replace message with a generic one in reports.
    """

    exit_code: int = 1
    code: str = "internal_error"
    expose: bool = False

    def __init__(
        self,
        message: str | None = None,
        *,
        details: Any | None = None,
    ) -> None:
        super().__init__(message)
        self.message = message or self.default_message()
        self.details = details

    def __str__(self) -> str:
        return self.message

    def default_message(self) -> str:
        return "An unexpected error occurred."

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "type": self.__class__.__name__,
            "code": self.code,
            "exit_code": self.exit_code,
            "message": self.message if self.expose else self.public_message(),
        }
        if self.details is not None:
            payload["details"] = self.details
        return {"error": payload}

    def public_message(self) -> str:
        if self.code == "internal_error":
            return "Something went wrong on our side."
        return self.message


# Exit code 2
class ConfigError(AppError):
    exit_code = 2
    code = "config_error"
    expose = True

    def default_message(self) -> str:
        return "The experiment configuration is invalid."


# Exit code 3
class DataError(AppError):
    exit_code = 3
    code = "data_error"
    expose = True

    def default_message(self) -> str:
        return "Input data could not be read."


class IngestionError(DataError):
    code = "ingestion_error"

    def default_message(self) -> str:
        return "The corpus is unreadable or empty."


class CheckpointError(DataError):
    code = "checkpoint_error"

    def default_message(self) -> str:
        return "The checkpoint could not be loaded."


class CheckpointVersionError(CheckpointError):
    code = "checkpoint_version"

    def default_message(self) -> str:
        return "Unsupported checkpoint format version."


class CheckpointShapeError(CheckpointError):
    code = "checkpoint_shape"

    def default_message(self) -> str:
        return "Checkpoint arrays do not match the model configuration."


class TruncatedCheckpointError(CheckpointError):
    code = "checkpoint_truncated"

    def default_message(self) -> str:
        return "The checkpoint file is truncated."


class CorruptCheckpointError(CheckpointError):
    code = "checkpoint_corrupt"

    def default_message(self) -> str:
        return "The checkpoint payload failed its integrity check."


# Exit code 4
class NumericalAbortError(AppError):
    exit_code = 4
    code = "numerical_abort"
    expose = True

    def default_message(self) -> str:
        return "A non-finite value aborted the computation."


class EvaluationError(NumericalAbortError):
    code = "evaluation_error"

    def default_message(self) -> str:
        return "The function evaluated to a non-finite value."


# Programming/precondition errors (exit code 1)
class DimensionError(AppError):
    code = "dimension_error"
    expose = True

    def default_message(self) -> str:
        return "Tensor shapes are incompatible."


class PreconditionError(AppError):
    code = "precondition_failed"
    expose = True

    def default_message(self) -> str:
        return "A required precondition failed."


class CapacityError(AppError):
    code = "capacity_exceeded"
    expose = True

    def default_message(self) -> str:
        return "Capacity exceeded."


class SequenceLengthError(AppError):
    code = "length_error"
    expose = True

    def default_message(self) -> str:
        return "The sequence is longer than the model supports."


class ScheduleError(AppError):
    code = "schedule_error"
    expose = True

    def default_message(self) -> str:
        return "Step is outside the schedule."


class TokenIndexError(AppError, IndexError):
    code = "index_error"
    expose = True

    def default_message(self) -> str:
        return "Token id is outside the vocabulary."
