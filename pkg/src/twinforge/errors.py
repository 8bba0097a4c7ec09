"""Error types shared across the platform.

Every error carries a stable ``code`` string that the HTTP layer maps onto a
status code and the CLI renders to stderr.
"""

from __future__ import annotations


class TwinError(Exception):
    """Base class for all platform errors."""

    code = "error"
    http_status = 500

    def __init__(self, message: str = "", **detail):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail

    def to_dict(self) -> dict:
        body = {"code": self.code, "message": self.message}
        if self.detail:
            body["detail"] = self.detail
        return body


class NotFound(TwinError):
    code = "not_found"
    http_status = 404


class Forbidden(TwinError):
    code = "forbidden"
    http_status = 403


class NotManager(TwinError):
    """Management operation sent to an instance that does not manage the DT."""

    code = "not_manager"
    http_status = 403


class Unauthorized(TwinError):
    code = "unauthorized"
    http_status = 401


class DuplicateName(TwinError):
    code = "duplicate_name"
    http_status = 409


class InvalidManifest(TwinError):
    code = "invalid_manifest"
    http_status = 400


class CorruptPayload(TwinError):
    code = "corrupt_payload"
    http_status = 502


class IllegalTransition(TwinError):
    code = "illegal_transition"
    http_status = 409


class ScriptFailed(TwinError):
    code = "script_failed"
    http_status = 409


class SnapshotFailed(TwinError):
    code = "snapshot_failed"
    http_status = 500


class UnresolvedRef(TwinError):
    code = "unresolved_ref"
    http_status = 400


class InvalidConfig(TwinError):
    code = "invalid_config"
    http_status = 400

    def __init__(self, message: str = "", diagnostics=None, **detail):
        if diagnostics:
            detail["diagnostics"] = [
                {"path": d.path, "message": d.message} if hasattr(d, "path") else d
                for d in diagnostics
            ]
        super().__init__(message, **detail)


class MissingCommunication(TwinError):
    code = "missing_communication"
    http_status = 400


class NoWorkers(TwinError):
    """Raised never; used as a diagnostic code on queued jobs without workers."""

    code = "no_workers"
    http_status = 200


class AlreadyFinished(TwinError):
    code = "already_finished"
    http_status = 409


class InvalidTopic(TwinError):
    code = "invalid_topic"
    http_status = 400


class InvalidPattern(TwinError):
    code = "invalid_pattern"
    http_status = 400


class Unreachable(TwinError):
    code = "unreachable"
    http_status = 502


class ProtocolMismatch(TwinError):
    code = "protocol_mismatch"
    http_status = 502


class DuplicateLink(TwinError):
    code = "duplicate_link"
    http_status = 409


class Conflict(TwinError):
    code = "conflict"
    http_status = 409


class PeerUnknown(TwinError):
    code = "peer_unknown"
    http_status = 400


class BrokerUnreachable(TwinError):
    code = "broker_unreachable"
    http_status = 502


class RecordLogCorrupt(TwinError):
    """Replay hit a line that does not parse; aborts startup."""

    code = "record_log_corrupt"
    http_status = 500

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(
            f"corrupt record log {path}:{line_no}: {reason}",
            path=str(path),
            line_no=line_no,
        )
        self.path = str(path)
        self.line_no = line_no


ERROR_CODES = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, TwinError)
}


def error_from_code(code: str, message: str = "", **detail) -> TwinError:
    """Rehydrate a TwinError from an API error body."""
    cls = ERROR_CODES.get(code, TwinError)
    err = cls.__new__(cls)
    TwinError.__init__(err, message, **detail)
    return err
