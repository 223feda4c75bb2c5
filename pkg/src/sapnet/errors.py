"""Exception types shared across the package.

Keeping these in one place lets the CLI map failure classes onto exit codes
(config problems -> 2, everything else -> 1) without string matching.
"""


class SapnetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SapnetError, ValueError):
    """Invalid configuration: bad value, unknown key, inconsistent fields."""


class InputError(SapnetError, ValueError):
    """Invalid runtime input: wrong shape, undersized image, unpaired file."""


class NumericError(SapnetError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class CheckpointError(ConfigError):
    """Checkpoint cannot be restored: unknown version or mismatched config."""


class PretrainedWeightsUnavailable(SapnetError, RuntimeError):
    """Pretrained weights requested but not reachable in this environment."""
