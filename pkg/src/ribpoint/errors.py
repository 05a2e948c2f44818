"""Exception types shared across the package."""


class RibPointError(Exception):
    """Base class for errors raised by this package."""


class FormatError(RibPointError):
    """A file does not conform to its declared container format.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFeatureError(RibPointError):
    """The input uses a feature this reader deliberately does not support."""
