"""Exception types raised across the package."""


class MotionMAEError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MotionMAEError, ValueError):
    pass


class OutOfRange(MotionMAEError, ValueError):
    pass


class TooSmall(MotionMAEError, ValueError):
    pass


class OddFrameCount(MotionMAEError, ValueError):
    pass


class NonTilingRegion(MotionMAEError, ValueError):
    pass


class NonIntegralVisibleCount(MotionMAEError, ValueError):
    pass


class MissingCache(MotionMAEError, RuntimeError):
    pass


class LabelOutOfRange(MotionMAEError, ValueError):
    pass


class EmptyInput(MotionMAEError, ValueError):
    pass


class VersionMismatch(MotionMAEError, ValueError):
    pass


class ConfigError(MotionMAEError, ValueError):
    pass


class BadFormat(MotionMAEError, ValueError):
    """A file is not in the expected container format."""


class TruncatedFile(BadFormat):
    pass
