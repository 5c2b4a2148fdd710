"""Exception hierarchy shared by every sparsefactor package.

Validation failures subclass ValueError so callers that only know the
standard library still catch them. The CLI maps validation errors to
exit code 1 and everything else to exit code 2.
"""


class SparseFactorError(Exception):
    """Base class for all sparsefactor errors."""

    pass


class DataValidationError(SparseFactorError, ValueError):
    """Raised when input data, masks or files are malformed."""

    pass


class DimensionError(SparseFactorError, ValueError):
    """Raised when array shapes disagree."""

    pass


class SpikeConstraintError(SparseFactorError, ValueError):
    """Raised when a loading is nonzero while its indicator is zero."""

    pass


class NumericalError(SparseFactorError, ArithmeticError):
    """Raised when a factorisation fails or a quantity is not finite.

    Carries the (row, factor) or (factor, column) index that failed so
    the message points at the offending coordinate.
    """

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        self.index = index
        if index is not None:
            message = f"{message} (index={index})"
        super().__init__(message)


class ParameterError(SparseFactorError, ValueError):
    """Raised when a parameter lies outside its support (e.g. tau <= 0)."""

    pass


class SamplerError(SparseFactorError):
    """Raised when a Gibbs sweep fails; wraps the inner error."""

    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


class VariationalError(SparseFactorError):
    """Raised when a CAVI run fails; wraps the inner error."""

    def __init__(self, message: str, sweep: int):
        self.sweep = sweep
        super().__init__(f"sweep {sweep}: {message}")


class SimulationError(SparseFactorError):
    """Raised when a simulated row keeps producing zero signal variance."""

    pass


class RelabelError(SparseFactorError, ValueError):
    """Raised when chains cannot be relabelled together."""

    pass


class StageError(SparseFactorError):
    """Raised by the experiment pipeline when a stage fails."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")


class ConfigurationError(SparseFactorError):
    """Raised when required runtime configuration is missing or malformed."""

    pass
