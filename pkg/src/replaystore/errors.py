"""Exception hierarchy. Each class carries the stable numeric code used on the wire."""


class ReplayError(Exception):
    code = 5


class NotFoundError(ReplayError, KeyError):
    code = 1

    def __str__(self):
        return Exception.__str__(self)


class InvalidArgumentError(ReplayError, ValueError):
    code = 2


class DeadlineExceededError(ReplayError, TimeoutError):
    code = 3


class ResourceExhaustedError(ReplayError):
    code = 4


class InternalError(ReplayError):
    code = 5


class SignatureMismatch(InvalidArgumentError):
    pass


class CancelledError(ReplayError):
    """Raised to blocked callers when a table or server shuts down."""

    code = 6


class TransportError(ReplayError, ConnectionError):
    """The connection to a server failed and retries were exhausted."""

    code = 7


BY_CODE = {cls.code: cls for cls in (
    NotFoundError, InvalidArgumentError, DeadlineExceededError,
    ResourceExhaustedError, InternalError, CancelledError)}


def from_code(code: int, detail: str) -> ReplayError:
    return BY_CODE.get(code, InternalError)(detail)
