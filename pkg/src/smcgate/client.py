"""Reference client: catalog, grants, computations."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .backend import ComputationResult, ResultVerificationError, open_result
from .canonical import ProtocolError, canonical_serialize
from .crypto import Certificate, DecryptionError, Identity, verify, verify_certificate
from .model import ComputationRequest, Grant, GrantRequest, Query
from .reasons import Reason

log = logging.getLogger(__name__)

RENEW_FRACTION = 0.1


class ClientError(Exception):
    """Local refusal or a failure notice passed through from the gateway."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class TamperedResult(ClientError):
    def __init__(self, detail: str):
        super().__init__("TAMPERED_RESULT", detail)


class GrantStore:
    """Grants keyed by canonical query string, optionally persisted as JSON."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = None if path is None else Path(path)
        self._grants: dict[str, Grant] = {}
        if self.path is not None and self.path.exists():
            raw = json.loads(self.path.read_text())
            for key, g in raw.items():
                self._grants[key] = Grant.from_dict(g)

    def put(self, grant: Grant) -> None:
        for q in grant.queries:
            self._grants[q.canonical()] = grant
        self._save()

    def get(self, query: Query) -> Grant | None:
        return self._grants.get(query.canonical())

    def discard(self, grant: Grant) -> None:
        for key in [k for k, g in self._grants.items() if g == grant]:
            del self._grants[key]
        self._save()

    def __len__(self) -> int:
        return len(self._grants)

    def _save(self) -> None:
        if self.path is not None:
            self.path.write_bytes(canonical_serialize({k: g.to_dict() for k, g in self._grants.items()}))


@dataclass(frozen=True)
class CatalogEntry:
    query: Query
    description: str


def select(catalog: Sequence[CatalogEntry], selector: str) -> Query:
    """Pick a query by index into the catalog or by canonical-string prefix."""
    if selector.isdigit():
        idx = int(selector)
        if idx >= len(catalog):
            raise ClientError("NO_SUCH_QUERY", f"index {idx} outside catalog of {len(catalog)}")
        return catalog[idx].query
    hits = [e.query for e in catalog if e.query.canonical().startswith(selector)]
    if len(hits) != 1:
        raise ClientError("NO_SUCH_QUERY", f"{selector!r} matches {len(hits)} queries")
    return hits[0]


class Client:
    def __init__(
        self,
        identity: Identity,
        gateway_address: str,
        transport,
        anchors: Iterable[Certificate],
        authorities: Iterable[Certificate],
        grants: GrantStore | None = None,
        clock=time.time,
        timeout: float = 60.0,
    ):
        self.identity = identity
        self.gateway_address = gateway_address
        self.transport = transport
        self.anchors = list(anchors)
        self.authorities = list(authorities)
        self.grants = grants if grants is not None else GrantStore()
        self.clock = clock
        self.timeout = timeout

    def metadata(self) -> list[CatalogEntry]:
        response = self.transport.get(self.gateway_address, "/metadata", timeout=self.timeout)
        try:
            return [CatalogEntry(Query.from_dict(q), q.get("description", "")) for q in response["queries"]]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed catalog: {exc}") from exc

    def valid_grant(self, grant: Grant, now: int) -> bool:
        """Client-side re-check of holder, validity window and issuer signature."""
        if grant.holder != self.identity.fingerprint or not grant.not_before <= now <= grant.not_after:
            return False
        payload = canonical_serialize(grant.signing_payload())
        return any(verify_certificate(a, self.anchors, now) and verify(grant.sig_issuer, a, payload) for a in self.authorities)

    def request_grant(self, queries: Iterable[Query]) -> Grant:
        queries = tuple(queries)
        request = GrantRequest(self.identity.certificate, queries).signed(self.identity)
        response = self.transport.post(self.gateway_address, "/grants", request.to_dict(), timeout=self.timeout)
        if response.get("status") != "ok":
            raise ClientError(response.get("reason", "FAILURE"), response.get("detail", ""))
        grant = Grant.from_dict(response["grant"])
        now = int(self.clock())
        if not self.valid_grant(grant, now):
            raise ClientError("GRANT_INVALID", "grant from gateway failed local verification; discarded")
        if {q.canonical() for q in grant.queries} != {q.canonical() for q in request.queries}:
            raise ClientError("GRANT_INVALID", "grant does not cover exactly the requested queries")
        self.grants.put(grant)
        return grant

    def grant_for(self, query: Query) -> Grant | None:
        """Stored grant for ``query``, renewed when less than 10% of its lifetime is left."""
        grant = self.grants.get(query)
        if grant is None:
            return None
        now = int(self.clock())
        remaining = grant.not_after - now
        if not self.valid_grant(grant, now) or remaining < RENEW_FRACTION * (grant.not_after - grant.not_before):
            log.info("renewing grant for %s", query.canonical())
            try:
                return self.request_grant(grant.queries)
            except ClientError:
                self.grants.discard(grant)
                raise
        return grant

    def compute(self, query: Query) -> ComputationResult:
        grant = self.grant_for(query)
        if grant is None:
            raise ClientError("NO_GRANT", f"no stored grant for {query.canonical()}")
        now = int(self.clock())
        request = ComputationRequest(query, self.identity.certificate, grant, now).signed(self.identity)
        session_id = None
        final = None
        for message in self._stream("/computations", request.to_dict()):
            if message.get("status") == "accepted":
                session_id = message["session_id"]
            else:
                final = message
        if final is None:
            raise ClientError(Reason.SESSION_ERROR.value, "connection closed before a result arrived")
        if final.get("status") != "ok":
            raise ClientError(final.get("reason", "FAILURE"), final.get("detail", ""))
        try:
            ciphertext = bytes.fromhex(final["ciphertext"])
            return open_result(self.identity, ciphertext, self.anchors, int(self.clock()), session_id or final["session_id"])
        except (DecryptionError, ResultVerificationError, ValueError, ProtocolError) as exc:
            raise TamperedResult(str(exc)) from exc

    def _stream(self, path: str, body: dict):
        stream = getattr(self.transport, "stream", None)
        if stream is None:
            yield self.transport.post(self.gateway_address, path, body, timeout=self.timeout)
        else:
            yield from stream(self.gateway_address, path, body, timeout=self.timeout)
