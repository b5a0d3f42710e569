"""Exception types raised by the library."""


class IvForestError(Exception):
    """Base class for all library errors."""


class SchemaError(IvForestError):
    """A required column or feature is missing or misdeclared."""


class CsvParseError(IvForestError):
    """A cell could not be parsed; carries the offending row index."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(IvForestError):
    """A value violates its declared domain (e.g. treatment not in {0,1})."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateCutpointError(IvForestError):
    """Tercile cutpoints coincide (constant or near-constant input)."""


class CapacityError(IvForestError):
    """Too few observations or clusters for the requested forest geometry."""


class ConfigError(IvForestError):
    """Invalid run configuration."""


class WeakIdentificationError(IvForestError):
    """Local 2SLS denominator below the weak-instrument floor."""

    def __init__(self, message, denominator=None):
        super().__init__(message)
        self.denominator = denominator


class NoOobTreesError(IvForestError):
    """No admissible tree for an out-of-bag query."""
