from __future__ import annotations


class EdgeStreamError(Exception):
    """Base class for all errors raised by edgestream."""


class CodecError(EdgeStreamError):
    def __init__(self, message: str, attribute: str | None = None):
        super().__init__(message)
        self.attribute = attribute


class FrameError(CodecError):
    """A byte buffer does not hold exactly one well-formed tuple."""


class SchemaError(EdgeStreamError):
    pass


class PlanError(EdgeStreamError):
    """Plan validation failed; ``errors`` lists every violation found."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class LoadError(EdgeStreamError):
    pass


class AbiError(EdgeStreamError):
    pass


class ConfigError(EdgeStreamError):
    pass


class OperatorFault(EdgeStreamError):
    def __init__(self, message: str, reason: str = ""):
        super().__init__(message)
        self.reason = reason


class PlacementError(EdgeStreamError):
    pass


class EscalationSignal(PlacementError):
    """Raised when a cluster cannot resolve a placement on its own."""

    def __init__(self, reason: str, cluster_id: str | None = None, query_id: str | None = None):
        super().__init__(reason)
        self.reason = reason
        self.cluster_id = cluster_id
        self.query_id = query_id


class ConflictError(EdgeStreamError):
    pass


class NotFoundError(EdgeStreamError):
    pass


class StreamError(EdgeStreamError):
    pass


class SchemaMismatch(StreamError):
    """Handshake disagreed on stream or schema id. Never retried."""


class StreamClosed(StreamError):
    pass
