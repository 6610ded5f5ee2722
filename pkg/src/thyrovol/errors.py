"""Exception hierarchy shared by all thyrovol modules."""


class ThyroVolError(Exception):
    """Base class for every error raised by thyrovol."""


class FormatError(ThyroVolError):
    """Malformed file content. Messages carry file, line and field context."""


class OutOfRange(ThyroVolError):
    """A query time lies outside the span of a pose stream."""


class DegenerateStream(ThyroVolError):
    """A pose stream has too few samples to interpolate."""


class EmptyInput(ThyroVolError):
    pass


class ConfigError(ThyroVolError):
    pass


class ShapeError(ThyroVolError):
    pass


class StateError(ThyroVolError):
    pass


class DataError(ThyroVolError):
    pass


class DomainError(ThyroVolError):
    pass


class InsufficientData(ThyroVolError):
    pass


class MissingData(ThyroVolError):
    pass
