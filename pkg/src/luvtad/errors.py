"""Exception hierarchy shared by all stages.

Every error carries a short machine-parsable ``reason`` used by the CLI as
the prefix of its single-line error message.
"""


class LuvtError(Exception):
    reason = "error"


class ConfigError(LuvtError, ValueError):
    reason = "config"


class NumericInstabilityError(LuvtError, FloatingPointError):
    reason = "numeric"


class NormalizationError(LuvtError, ValueError):
    reason = "normalization"


class ShapeError(LuvtError, ValueError):
    reason = "shape"


class UsageError(LuvtError, RuntimeError):
    reason = "usage"


class DataContractError(LuvtError, ValueError):
    """Raised when training data violates the defect-free-only contract."""

    reason = "data"


class FormatError(LuvtError, ValueError):
    reason = "format"
