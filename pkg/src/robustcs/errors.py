"""Exception taxonomy shared across the package."""


class RobustCSError(Exception):
    """Base class for all package-specific errors."""


class ContractError(RobustCSError, ValueError):
    """A caller violated a documented precondition (shape, sign, range)."""


class ConfigurationError(RobustCSError, ValueError):
    """An experiment or sampler configuration is invalid or infeasible."""


class FormatError(RobustCSError, ValueError):
    """A file does not follow its documented binary or text layout."""


class NumericalError(RobustCSError, RuntimeError):
    """A computation produced non-finite values or failed to converge."""


class UnsupportedOperationError(RobustCSError, TypeError):
    """A computation requested a primitive the engine does not provide."""


class TrainingError(RobustCSError, RuntimeError):
    """Network training failed (non-finite loss, bad data)."""
