"""Exception taxonomy shared across the package."""


class GoalkeepError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GoalkeepError):
    """A configuration is inconsistent (bad dimensions, invalid ranges)."""


class InputError(GoalkeepError):
    """Runtime input violates a precondition (out-of-grid goal, shape mismatch)."""


class InternalError(GoalkeepError):
    """An internal contract was broken; indicates a bug, not bad user input."""


class CheckpointError(GoalkeepError):
    """A checkpoint file is unreadable, corrupt, or has an unsupported version."""
