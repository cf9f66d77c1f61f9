"""Exception types raised across the package."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class LoadError(RuntimeError):
    """A dataset on disk could not be ingested."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
