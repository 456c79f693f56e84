"""Exception hierarchy and wire status codes.

Every server-visible failure maps onto exactly one wire status; purely
client-side or internal failures (connect errors, corrupt metadata) keep
their own exception types and never cross the wire.
"""

from enum import IntEnum


class Status(IntEnum):
    S_OK = 0
    E_KEY_NOT_FOUND = 1
    E_ALREADY_EXISTS = 2
    E_NO_SPACE = 3
    E_TOO_LARGE = 4
    E_BAD_POOL = 5
    E_NO_INDEX = 6
    E_NO_MATCH = 7
    E_ADO_FAULT = 8
    E_PROTOCOL = 9
    E_RANGE = 10
    E_BUSY = 11
    E_BAD_REGEX = 12
    E_VERSION = 13


class McasError(Exception):
    """Base error; `status` is the wire status a server handler reports."""

    status = Status.E_PROTOCOL


class KeyNotFoundError(McasError):
    status = Status.E_KEY_NOT_FOUND


class AlreadyExistsError(McasError):
    status = Status.E_ALREADY_EXISTS


class NoSpaceError(McasError):
    status = Status.E_NO_SPACE


class TooLargeError(McasError):
    status = Status.E_TOO_LARGE


class BadPoolError(McasError):
    status = Status.E_BAD_POOL


class NoIndexError(McasError):
    status = Status.E_NO_INDEX


class NoMatchError(McasError):
    status = Status.E_NO_MATCH


class AdoFaultError(McasError):
    status = Status.E_ADO_FAULT


class ProtocolError(McasError):
    status = Status.E_PROTOCOL


class RangeError(McasError):
    status = Status.E_RANGE


class BusyError(McasError):
    status = Status.E_BUSY


class BadRegexError(McasError):
    status = Status.E_BAD_REGEX


class VersionMismatchError(McasError):
    status = Status.E_VERSION


# -- storage-internal errors (never serialized; surface as E_* above or abort) --

class BadCapacityError(McasError):
    """Arena capacity not a multiple of the region granularity."""


class CorruptHeaderError(McasError):
    """Magic/version check failed while opening persistent state."""


class UnknownPoolError(BadPoolError):
    pass


class LogFullError(NoSpaceError):
    """Bounded undo log exceeded."""


class BadFreeError(McasError):
    """Free of an offset that is not a live allocation."""


class OverlapError(McasError):
    """Reconstitution input contains overlapping live records."""


class ConfigError(McasError):
    """Invalid server configuration; `field` names the offending key."""

    def __init__(self, field, message=""):
        super().__init__(f"{field}: {message}" if message else field)
        self.field = field


class NotRegisteredError(McasError):
    """Direct transfer attempted outside any registered buffer."""


class ConnectError(McasError):
    """Client could not reach or keep a session with the server."""


def status_of(exc: BaseException) -> Status:
    if isinstance(exc, McasError):
        return exc.status
    return Status.E_ADO_FAULT if isinstance(exc, Exception) else Status.E_PROTOCOL
