"""Exception hierarchy shared by the analysis modules."""


class NVSDError(Exception):
    """Base class for all errors raised by :mod:`nvsd`."""


class DomainError(NVSDError, ValueError):
    """An input lies outside the domain where a formula is defined."""


class InconsistentConstraintsError(DomainError):
    """Slope and width constraints admit no real hyperfine pair."""


class ConfigurationError(NVSDError, ValueError):
    """A configuration value is invalid or cannot be satisfied."""


class ResourceError(NVSDError, RuntimeError):
    """A request would exceed a configured resource cap."""


class InputFormatError(NVSDError, ValueError):
    """An input file could not be parsed.

    Parameters
    ----------
    message : str
        Human readable description.
    line, column : int, optional
        1-based location of the offending token, when known.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class NumericalError(NVSDError, ArithmeticError):
    """A computation produced non-finite values or failed to converge fatally."""
