"""Exception hierarchy shared across the package."""


class EmilError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EmilError):
    """Operands have incompatible shapes."""


class DomainError(EmilError):
    """An argument is outside the operation's domain."""


class EmptyBagError(DomainError):
    """A bag with zero instances was passed where at least one is required."""


class NumericError(EmilError):
    """A non-finite value appeared during computation."""


class FormatError(EmilError):
    """A file does not conform to its on-disk format."""


class ConfigError(EmilError):
    """A configuration value is invalid or inconsistent."""
