"""Request checks shared by the gateway and the peers.

Checks run in a fixed order and the first failing one is reported.
"""

from __future__ import annotations

from typing import Callable, Iterable

from .canonical import canonical_serialize
from .crypto import Certificate, verify, verify_certificate
from .model import ComputationRequest, GrantRequest, Query
from .reasons import Failure, Reason

AccessDecision = Callable[[Query, Certificate], bool]


def check_grant_request(
    r: GrantRequest,
    anchors: Iterable[Certificate],
    access_policy: AccessDecision,
    now: int,
) -> None:
    """Certificate validity, request signature, then the access policy per query."""
    anchors = list(anchors)
    if not r.certificate.purpose or not verify_certificate(r.certificate, anchors, now):
        raise Failure(Reason.BAD_CERT, "client certificate does not verify")
    if not verify(r.sig_client, r.certificate, canonical_serialize(r.signing_payload())):
        raise Failure(Reason.BAD_SIG, "request signature does not match the enclosed certificate")
    for q in r.queries:
        if not access_policy(q, r.certificate):
            raise Failure(Reason.POLICY_DENIED, q.canonical())


def check_computation_request(
    r: ComputationRequest,
    anchors: Iterable[Certificate],
    authorities: Iterable[Certificate],
    now: int,
) -> None:
    """Holder binding, request signature, grant window, grant issuer, query inclusion."""
    anchors = list(anchors)
    grant = r.grant
    if grant.holder != r.certificate.fingerprint:
        raise Failure(Reason.HOLDER_MISMATCH, "grant holder is not the requesting client")
    if not verify_certificate(r.certificate, anchors, now):
        raise Failure(Reason.HOLDER_MISMATCH, "client certificate does not verify")
    if not verify(r.sig_client, r.certificate, canonical_serialize(r.signing_payload())):
        raise Failure(Reason.BAD_REQUEST_SIG, "request signature does not verify")
    if not grant.not_before <= now:
        raise Failure(Reason.GRANT_NOT_YET_VALID, f"grant valid from {grant.not_before}, now {now}")
    if not now <= grant.not_after:
        raise Failure(Reason.GRANT_EXPIRED, f"grant expired at {grant.not_after}, now {now}")
    payload = canonical_serialize(grant.signing_payload())
    if not any(
        verify_certificate(issuer, anchors, now) and verify(grant.sig_issuer, issuer, payload)
        for issuer in authorities
    ):
        raise Failure(Reason.BAD_ISSUER, "grant is not signed by a trusted access authority")
    if not grant.permits(r.query):
        raise Failure(Reason.QUERY_NOT_GRANTED, r.query.canonical())
