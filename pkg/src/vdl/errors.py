"""Exception types shared across the package."""


class VdlError(Exception):
    """Base class for every error raised by this package."""


class ZeroVector(VdlError, ValueError):
    pass


class ShapeMismatch(VdlError, ValueError):
    pass


class StaleCache(VdlError, RuntimeError):
    """A backward pass was given a cache recorded before the net changed."""


class NonFiniteGradient(VdlError, FloatingPointError):
    pass


class NonFiniteLoss(VdlError, FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class RangeError(VdlError, ValueError):
    pass


class DegenerateDirection(VdlError, ValueError):
    pass


class DegenerateTriplet(VdlError, ValueError):
    pass


class EmptyPool(VdlError, ValueError):
    pass


class MissingLabels(VdlError, ValueError):
    pass


class FormatError(VdlError, ValueError):
    """Base for on-disk format problems."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class CorruptLength(FormatError):
    pass


class SchemaError(FormatError):
    pass


class ConfigError(VdlError, ValueError):
    pass
