"""Exception hierarchy shared by every stage of the pipeline."""


class TokenDropError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ShapeError(TokenDropError, ValueError):
    pass


class DegenerateRowError(TokenDropError, ValueError):
    pass


class UndefinedSimilarityError(TokenDropError, ValueError):
    pass


class ConfigError(TokenDropError, ValueError):
    pass


class CacheError(TokenDropError, RuntimeError):
    pass


class CalibrationError(TokenDropError, RuntimeError):
    def __init__(self, message, floor=None):
        super().__init__(message)
        self.floor = floor


class ParseError(TokenDropError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
