"""Exception types shared across the package."""


class MultiexitError(Exception):
    """Base class for all package errors."""


class ShapeError(MultiexitError, ValueError):
    """Operands have incompatible shapes.

    Carries ``expected`` and ``actual`` attributes when the mismatch is
    against a known contract.
    """

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class NumericError(MultiexitError, ValueError):
    """Non-finite or otherwise invalid numeric input."""

    def __init__(self, message, bad_count=None):
        super().__init__(message)
        self.bad_count = bad_count


class ContractError(MultiexitError, ValueError):
    """A documented precondition was violated by the caller."""


class TapeError(MultiexitError, RuntimeError):
    """Gradient tape misuse (no live tape, consumed tape, nested tapes)."""


class DegenerateBatchError(MultiexitError, ValueError):
    """Batch statistics are undefined (train-mode batch of size one)."""


class ConstructionError(MultiexitError, ValueError):
    """A network configuration violates a structural constraint."""


class CacheIdentityError(MultiexitError, RuntimeError):
    """A section cache was reused with a different input sample."""


class ParseError(MultiexitError, ValueError):
    """A data or model file is malformed."""


class ConfigError(MultiexitError, ValueError):
    """A run configuration file or flag set is invalid."""


class TrainingDivergedError(MultiexitError, RuntimeError):
    """Training produced a non-finite loss; carries diagnostics."""

    def __init__(self, message, epoch=None, batch=None, per_exit_losses=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.per_exit_losses = per_exit_losses
