"""Shared exception types."""


class ContractViolation(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class NonFiniteError(FloatingPointError):
    """A loss, gradient, or HVP evaluated to NaN/Inf.

    `stage` names the quantity that blew up (e.g. "loss", "g", "g0", "h", "g1");
    `node` carries the offending graph node index when known.
    """

    def __init__(self, message, stage=None, node=None):
        super().__init__(message)
        self.stage = stage
        self.node = node


class IdxParseError(ValueError):
    """Malformed IDX file; `offset` is the byte position of the problem."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Invalid run configuration; `field` names the bad entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
