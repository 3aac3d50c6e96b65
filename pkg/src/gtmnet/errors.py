"""Shared exception types.

Every validation failure raises one of these so callers (and the CLI exit
code mapping) can tell configuration mistakes apart from numeric faults.
"""


class ConfigError(ValueError):
    """Invalid configuration value or argument combination."""


class ShapeError(ValueError):
    """Operands with incompatible shapes or dtypes; message names both."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


class SchemaError(ValueError):
    """Config-file schema violation; message lists the offending keys."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss; carries the trace so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
