class IxError(Exception):
    """Base class for package errors."""


class ConfigError(IxError, ValueError):
    pass


class FormatError(IxError):
    """Corrupt or truncated binary container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingExhausted(IxError):
    """No admissible point pair found within the retry budget."""


class JudgeUnavailable(IxError):
    """External judge timed out, died, or replied with garbage."""


class RewardUnavailable(IxError):
    pass


class DegenerateDensity(IxError):
    """A transition density was requested for a zero-noise step."""


class NumericError(IxError, FloatingPointError):
    pass


class StateError(IxError, RuntimeError):
    pass
