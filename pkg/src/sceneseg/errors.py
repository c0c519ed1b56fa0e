"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ConfigError(ValueError):
    """Bad or unknown configuration key/value."""


class DataError(ValueError):
    """Missing or inconsistent input data."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GenerationError(RuntimeError):
    """Scene synthesis could not place all objects."""


class NumericError(RuntimeError):
    """A non-finite value appeared during optimization."""


class CheckpointError(ValueError):
    """Checkpoint incompatible with the configured model."""
