"""Machine-readable failure and veto codes."""

from __future__ import annotations

from enum import Enum


class Reason(str, Enum):
    # grant request checks, in evaluation order
    BAD_CERT = "BAD_CERT"
    BAD_SIG = "BAD_SIG"
    POLICY_DENIED = "POLICY_DENIED"
    # computation request checks, in evaluation order
    HOLDER_MISMATCH = "HOLDER_MISMATCH"
    BAD_REQUEST_SIG = "BAD_REQUEST_SIG"
    GRANT_NOT_YET_VALID = "GRANT_NOT_YET_VALID"
    GRANT_EXPIRED = "GRANT_EXPIRED"
    BAD_ISSUER = "BAD_ISSUER"
    QUERY_NOT_GRANTED = "QUERY_NOT_GRANTED"
    # peer-local policy
    CLIENT_NOT_ALLOWED = "CLIENT_NOT_ALLOWED"
    GROUP_TOO_SMALL = "GROUP_TOO_SMALL"
    STALE_REQUEST = "STALE_REQUEST"
    RATE_LIMITED = "RATE_LIMITED"
    # peer-side session checks
    BAD_GATEWAY_SIG = "BAD_GATEWAY_SIG"
    NOT_SELECTED = "NOT_SELECTED"
    UNSUPPORTED = "UNSUPPORTED"
    NO_DATA = "NO_DATA"
    # orchestration
    REQUEST_DROPPED = "REQUEST_DROPPED"
    PEER_VETO = "PEER_VETO"
    PEER_TIMEOUT = "PEER_TIMEOUT"
    TIMEOUT = "TIMEOUT"
    SESSION_ERROR = "SESSION_ERROR"
    MALFORMED = "MALFORMED"

    def __str__(self) -> str:
        return self.value

    @property
    def check(self) -> str | None:
        """Name of the verification check this code reports."""
        return CHECKS.get(self)


CHECKS = {
    Reason.BAD_CERT: "client_certificate",
    Reason.BAD_SIG: "grant_request_signature",
    Reason.POLICY_DENIED: "access_policy",
    Reason.HOLDER_MISMATCH: "holder_binding",
    Reason.BAD_REQUEST_SIG: "request_signature",
    Reason.GRANT_NOT_YET_VALID: "grant_not_before",
    Reason.GRANT_EXPIRED: "grant_not_after",
    Reason.BAD_ISSUER: "grant_issuer",
    Reason.QUERY_NOT_GRANTED: "query_inclusion",
    Reason.CLIENT_NOT_ALLOWED: "local_policy",
    Reason.GROUP_TOO_SMALL: "local_policy",
    Reason.STALE_REQUEST: "local_policy",
    Reason.RATE_LIMITED: "local_policy",
}

PEER_POLICY_REASONS = frozenset(r for r, c in CHECKS.items() if c == "local_policy")


class Failure(Exception):
    """A protocol-level rejection carrying a reason code."""

    def __init__(self, reason: Reason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail

    def to_dict(self) -> dict:
        return {"status": "failure", "reason": self.reason.value, "detail": self.detail}
