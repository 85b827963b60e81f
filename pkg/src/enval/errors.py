"""Exception taxonomy shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(EngineError):
    """An operation was called outside its declared precondition."""


class InputError(EngineError, ValueError):
    """Malformed numeric input (non-finite values, dimension mismatch)."""


class ConfigError(EngineError, ValueError):
    """Invalid episode, task, or training configuration."""


class OracleError(EngineError):
    """The simulated teacher cannot answer a query (mis-specified task)."""


class DatasetFormatError(EngineError, ValueError):
    """Task files violate the on-disk schema.

    Carries the offending row number when one is known.
    """

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class InsufficientData(EngineError):
    """A statistical comparison was requested with too few samples."""


class TrainingDiverged(EngineError):
    """IRL weight optimization left the stable region."""

    def __init__(self, message: str, log: list | None = None):
        super().__init__(message)
        self.log = log or []
