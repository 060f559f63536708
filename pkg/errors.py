from typing import Optional


class VideoGanError(Exception):
    """Base class for every error raised by this package"""


class ContractViolationError(VideoGanError, ValueError):
    """Tensor dimensions or ranks do not match what an operation requires"""


class ConfigurationError(VideoGanError, ValueError):
    pass


class DatasetError(VideoGanError, ValueError):
    pass


class NonFiniteError(VideoGanError, ArithmeticError):
    """A loss term or gradient became NaN/Inf"""

    def __init__(self, name: str, detail: Optional[str] = None):
        self.name = name
        message = f"non-finite value in '{name}'"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class CheckpointError(VideoGanError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"unsupported checkpoint version {found} (expected {expected})")


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, field: str, saved, expected):
        self.field = field
        super().__init__(
            f"configuration mismatch on '{field}': checkpoint has {saved!r}, expected {expected!r}"
        )
