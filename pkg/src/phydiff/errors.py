"""Exception types raised across the package."""


class PhyDiffError(Exception):
    """Base class for all package errors."""


class FormatError(PhyDiffError):
    pass


class TruncationError(FormatError):
    pass


class ParseError(PhyDiffError):
    pass


class ShapeError(PhyDiffError, ValueError):
    pass


class ConfigError(PhyDiffError):
    pass


class VersionError(PhyDiffError):
    pass


class SpecError(PhyDiffError, ValueError):
    pass


class DivergenceError(PhyDiffError):
    pass
