"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree with an operation's contract."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class FormatError(ValueError):
    """A file on disk does not match its documented layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(ValueError):
    """User-supplied data or configuration failed validation."""


class NumericError(RuntimeError):
    """A non-finite value appeared during training or evaluation."""
