"""Exception hierarchy shared by every llsa module."""


class LLSAError(Exception):
    """Base class for all errors raised by llsa."""


class ConfigError(LLSAError, ValueError):
    pass


class DivisibilityError(ConfigError):
    pass


class LevelError(ConfigError):
    pass


class TopKError(ConfigError):
    pass


class NotSquareBlock(ConfigError):
    pass


class ShapeMismatch(LLSAError, ValueError):
    pass


class IndexOutOfRange(LLSAError, IndexError):
    pass


class NonFiniteError(LLSAError, FloatingPointError):
    pass


class StaleState(LLSAError):
    """Saved forward state does not belong to the inputs given to backward."""


class PrecisionError(LLSAError):
    pass


class OracleSizeError(LLSAError, ValueError):
    """Raised when an O(N^2) reference is asked to run above its size cap."""


class FormatError(LLSAError, ValueError):
    pass


class IoError(LLSAError, OSError):
    pass
