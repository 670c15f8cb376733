"""Exception types shared across the package."""


class TripletHashError(Exception):
    """Base class for all package errors."""


class FormatError(TripletHashError):
    """A binary file does not match its expected on-disk format."""


class ConfigError(TripletHashError):
    """Invalid configuration or inconsistent user input."""


class ShapeError(TripletHashError):
    """Array dimensions or bit widths do not line up."""


class NumericError(TripletHashError):
    """Non-finite values encountered where finite ones are required."""


class UsageError(TripletHashError):
    """An API contract was violated (e.g. a forward trace reused)."""


class InsufficientDataError(TripletHashError):
    """Too few samples to perform the requested operation."""
