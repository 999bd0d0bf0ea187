"""Exception types shared across the package."""


class UsageError(ValueError):
    """Malformed call: wrong lengths, empty inputs, bad indices, unknown options."""


class DomainError(ValueError):
    """A numeric argument lies outside the region where the quantity is defined."""


class ConstructionError(RuntimeError):
    """A randomized or calibrated construction could not meet its own guarantees."""


class InvariantViolation(RuntimeError):
    """An internal invariant failed; indicates a bug rather than bad input."""
