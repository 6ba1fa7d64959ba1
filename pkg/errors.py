from __future__ import annotations

from typing import Iterable


class MnlLabError(Exception):
    """Base class for every error raised by the library."""


class ValidationError(MnlLabError, ValueError):
    pass


class EmptyAssortment(ValidationError):
    pass


class DuplicateIndex(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class CapacityExceeded(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFiniteUtility(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class MissingAnchor(ValidationError):
    pass


class ScheduleOutOfRange(ValidationError):
    pass


class InvalidK(ValidationError):
    pass


class MethodRevenueMismatch(ValidationError):
    pass


class BruteForceLimitExceeded(ValidationError):
    pass


class ConfigMismatch(ValidationError):
    pass


class MissingDiagnostics(MnlLabError):
    pass


class MalformedCsv(ValidationError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        detail = f"{message} ({', '.join(location)})" if location else message
        super().__init__(detail)
        self.row = row
        self.column = column


class ConfigError(ValidationError):
    def __init__(self, problems: Iterable[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) or "invalid configuration")
