"""Exception types shared across the toolkit."""


class CodechainError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CodechainError):
    """Invalid configuration value or usage."""


class DataError(CodechainError):
    """Invalid or inconsistent input data."""


class ParseError(DataError):
    """A record file could not be parsed."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason


class InternalError(CodechainError):
    """An internal invariant was violated; indicates a bug, not bad input."""
