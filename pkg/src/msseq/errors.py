"""Exception hierarchy shared across the package."""


class MsseqError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MsseqError):
    """Array shapes do not conform to an operation's contract."""


class NumericsError(MsseqError):
    """A non-finite value (NaN/Inf) appeared where finite math is required."""


class FormatError(MsseqError):
    """A binary file (mel payload, checkpoint) is malformed."""


class ConfigError(MsseqError):
    """Invalid configuration value or unknown configuration key."""


class InputKindError(MsseqError):
    """An operation received the wrong kind of input (e.g. a speech-only
    corpus handed to the text-input training stage)."""
