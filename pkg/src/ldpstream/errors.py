"""Exception hierarchy shared by every ldpstream module."""


class LDPStreamError(Exception):
    """Base class for all errors raised by ldpstream."""


class ParameterDomainError(LDPStreamError, ValueError):
    """Coin probabilities (or a count) fall outside their allowed domain."""


class InfeasibleTargetError(ParameterDomainError):
    """No first-coin probability above the floor meets a privacy target."""


class EncodingError(LDPStreamError, ValueError):
    """An answer vector does not match the shape of its query."""


class UndefinedMetricError(LDPStreamError, ValueError):
    """Relative error requested against a zero ground-truth count."""


class QueryParseError(LDPStreamError, ValueError):
    """A query or submission document could not be parsed.

    ``offset`` is the byte offset into the document where the problem was
    detected, and ``field`` names the offending field when there is one.
    """

    def __init__(self, message: str, offset: int = 0, field: str | None = None):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
        self.field = field


class QueryExpiredError(LDPStreamError):
    """The query's end time has passed; the device unsubscribes."""


class NotSubscribedError(LDPStreamError):
    """A device was asked to answer a query it never accepted."""


class UnknownQueryError(LDPStreamError, KeyError):
    """A submission or subscription names a query that is not registered."""


class CapacityError(LDPStreamError, MemoryError):
    """A simulation would exceed the configured memory bound."""

    def __init__(self, required_bytes: int, limit_bytes: int):
        super().__init__(
            f"simulation needs ~{required_bytes / 2**20:.0f} MiB, "
            f"limit is {limit_bytes / 2**20:.0f} MiB"
        )
        self.required_bytes = required_bytes
        self.limit_bytes = limit_bytes
