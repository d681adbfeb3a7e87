"""Exception types shared across the toolkit."""


class CanMpcError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CanMpcError):
    """Scenario file is malformed or violates a load-time invariant."""


class ModelCorruptionError(CanMpcError):
    """The timing engine reached a state that the model rules out."""


class PreconditionError(CanMpcError):
    """An operation was called outside its contract."""


class ObservationError(CanMpcError):
    """A bus observation is inconsistent with the chain parameters."""


class SchedulabilityError(CanMpcError):
    """A deadline miss was found where the caller requires schedulability."""
