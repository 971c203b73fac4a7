"""Exception and warning types shared across the package."""


class HetfxError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(HetfxError, ValueError):
    pass


class SchemaError(HetfxError):
    """A required column is absent from the input file."""


class DataError(HetfxError):
    """A cell or row violates the dataset contract."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class InsufficientDataError(DataError):
    pass


class SingularDesignError(HetfxError):
    pass


class EmptyNeighborhoodError(HetfxError):
    """No observation carries positive kernel weight at the evaluation point."""


class ConfigurationError(HetfxError):
    pass


class SeparationWarning(UserWarning):
    pass


class SparseOverlapWarning(UserWarning):
    pass


class ReliabilityWarning(UserWarning):
    pass
