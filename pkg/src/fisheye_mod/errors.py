"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataError`` subclasses exit with 2,
``NumericalError`` with 3, everything else derived from ``FmodError`` with 1.
"""


class FmodError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FmodError, ValueError):
    pass


class ShapeError(FmodError, ValueError):
    pass


class DataError(FmodError):
    pass


class NumericalError(FmodError, ArithmeticError):
    pass


# geometry
class GeometryError(FmodError, ValueError):
    pass


class AngleOutOfFov(GeometryError):
    pass


class DegeneratePoint(GeometryError):
    pass


class OutsideImageCircle(GeometryError):
    pass


class NoConvergence(GeometryError, NumericalError):
    pass


class BehindCamera(GeometryError):
    pass


# annotation
class DegenerateHull(FmodError, ValueError):
    pass


class InsufficientTrack(FmodError, ValueError):
    pass


class NonMonotonicTime(FmodError, ValueError):
    pass


# tensors / training / evaluation
class InvalidTarget(ShapeError):
    pass


class ConfigMismatch(ConfigError):
    pass


class EmptyManifest(DataError):
    pass
