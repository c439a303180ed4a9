"""Shared exception types."""


class HerasimError(Exception):
    """Base class for package errors."""


class ConfigError(HerasimError):
    """Bad input file, malformed config, or inconsistent parameters."""


class InvalidRateError(HerasimError, ValueError):
    """Arrival rate must be positive."""


class InvalidAllocationError(HerasimError, ValueError):
    """Allocation violates node limits (cores, ways, worker counts)."""


class CapacityError(HerasimError):
    """Requested worker set does not fit in node memory."""


class EmptySampleError(HerasimError, ValueError):
    """Percentile of an empty sample is undefined."""


class UndefinedEmuError(HerasimError, ValueError):
    """EMU is undefined when an isolated max load is zero."""


class InsufficientProfileError(HerasimError):
    """Profile has too few points for the requested operation."""


class IncompleteProfileError(HerasimError):
    """Profile is missing entries required by a lookup."""


class MissingProfileError(HerasimError):
    """No stored profile for a model that an operation needs."""


class UnschedulableModelError(HerasimError):
    """A model can never meet any positive target on this node."""


class InitializationError(HerasimError):
    """Co-located pair cannot be placed on the node at all."""
