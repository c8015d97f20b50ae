"""Exception types shared across the package."""


class PetrelError(Exception):
    """Base class for all errors raised by petrel."""


class FormatError(PetrelError):
    """A file or payload does not match its declared format."""


class ValidationError(PetrelError):
    """An input table, config, or column set fails a contract check."""


class DegenerateDataError(PetrelError):
    """Input data is degenerate for the requested operation (empty mask,
    zero variance, no comparable pairs, ...)."""


class ConvergenceError(PetrelError):
    """An iterative solver failed to converge within its iteration budget."""
