"""Exception types shared across the package."""


class CfpathError(Exception):
    """Base class for all package errors."""


class ZeroVector(CfpathError, ValueError):
    pass


class DimensionMismatch(CfpathError, ValueError):
    pass


class ShapeMismatch(CfpathError, ValueError):
    pass


class CountTooLarge(CfpathError, ValueError):
    pass


class SelectionNotEmpty(CfpathError, ValueError):
    pass


class OverlapError(CfpathError, ValueError):
    pass


class IndivisibleChannels(CfpathError, ValueError):
    pass


class UnknownMpp(CfpathError, ValueError):
    pass


class EmptyResult(CfpathError, ValueError):
    pass


class NonFiniteLoss(CfpathError, FloatingPointError):
    pass


class ModeMismatch(CfpathError, ValueError):
    pass


class InsufficientClassCount(CfpathError, ValueError):
    pass


class SingleClass(CfpathError, ValueError):
    pass


class NoPositives(CfpathError, ValueError):
    pass


class DataError(CfpathError):
    """Dataset on disk is missing or malformed."""


class ParseError(CfpathError, ValueError):
    """Config file error. ``line`` is 1-based, or None for whole-file issues."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        loc = ""
        if path is not None:
            loc = f"{path}:"
        if line is not None:
            loc += f"{line}:"
        super().__init__(f"{loc} {message}" if loc else message)
