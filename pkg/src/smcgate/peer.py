"""The sensor-platform daemon.

A peer keeps its readings local, re-verifies every computation request the
gateway forwards, applies its own policy, and only then contributes a
preprocessed value to the session. Accepted sessions are written to an
append-only accountability log.
"""

from __future__ import annotations

import json
import logging
import os
import sqlite3
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .backend import (
    ComputationResult,
    Participant,
    SessionError,
    SessionParty,
    SessionPlan,
    SUPPORTED_PROTOCOLS,
    seal_result,
)
from .canonical import ProtocolError, canonical_serialize
from .crypto import Certificate, Identity, verify, verify_certificate
from .model import (
    AccountabilityEntry,
    ComputationRequest,
    Label,
    Preprocessor,
    Preselector,
    eval_predicate,
    result_payload,
    to_fixed,
    verify_envelope_payload,
)
from .reasons import Failure, Reason
from .transport import Unreachable
from .verification import check_computation_request

log = logging.getLogger(__name__)

RETENTION_SECONDS = 30 * 24 * 3600
SESSION_TIMEOUT = 10.0


class EmptyWindowError(LookupError):
    pass


class ConfigurationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Reading:
    input: str
    value: Decimal
    timestamp: int


@dataclass(frozen=True)
class PeerProfile:
    peer_id: str
    certificate: Certificate
    labels: frozenset[Label]
    inputs: frozenset[str]
    protocols: frozenset[str] = frozenset({"sum"})
    address: str = ""

    def __post_init__(self):
        if not self.peer_id:
            raise ValueError("peer_id must be non-empty")
        if not self.labels:
            raise ValueError("peer must advertise at least one label")
        if not self.inputs:
            raise ValueError("peer must advertise at least one input")

    def to_dict(self) -> dict:
        return {
            "peer_id": self.peer_id,
            "certificate": self.certificate.to_dict(),
            "labels": [label.to_dict() for label in sorted(self.labels)],
            "inputs": sorted(self.inputs),
            "protocols": sorted(self.protocols),
            "address": self.address,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PeerProfile":
        try:
            return cls(
                peer_id=d["peer_id"],
                certificate=Certificate.from_dict(d["certificate"]),
                labels=frozenset(Label.from_dict(x) for x in d["labels"]),
                inputs=frozenset(d["inputs"]),
                protocols=frozenset(d["protocols"]),
                address=d.get("address", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed peer profile: {exc}") from exc


@dataclass
class LocalPolicy:
    allowed_client_fprs: frozenset[str] | None = None
    allowed_purposes: frozenset[str] | None = None
    min_group_size: int = 3
    max_request_age: int = 120
    max_requests_per_client_per_hour: int = 600

    def __post_init__(self):
        if self.min_group_size < 1 or self.max_request_age <= 0 or self.max_requests_per_client_per_hour <= 0:
            raise ValueError("policy limits must be positive")
        if self.allowed_client_fprs is not None:
            self.allowed_client_fprs = frozenset(self.allowed_client_fprs)
        if self.allowed_purposes is not None:
            self.allowed_purposes = frozenset(self.allowed_purposes)

    @classmethod
    def from_dict(cls, d: dict) -> "LocalPolicy":
        return cls(**d)


class ReadingStore:
    """Append-only readings per input, in SQLite. Old rows age out after 30 days."""

    def __init__(self, path: str | os.PathLike = ":memory:", retention: int = RETENTION_SECONDS):
        self._db = sqlite3.connect(str(path), check_same_thread=False)
        self._db.execute("CREATE TABLE IF NOT EXISTS readings (input TEXT NOT NULL, ts INTEGER NOT NULL, value TEXT NOT NULL)")
        self._db.execute("CREATE INDEX IF NOT EXISTS readings_input_ts ON readings (input, ts)")
        self._lock = threading.Lock()
        self.retention = retention

    def append(self, input: str, value, timestamp: int) -> Reading:
        reading = Reading(input, Decimal(str(value)) if isinstance(value, float) else Decimal(value), int(timestamp))
        with self._lock, self._db:
            (last,) = self._db.execute("SELECT MAX(ts) FROM readings WHERE input = ?", (input,)).fetchone()
            if last is not None and reading.timestamp <= last:
                raise ValueError(f"timestamp {reading.timestamp} not after last reading {last} for {input!r}")
            self._db.execute(
                "INSERT INTO readings (input, ts, value) VALUES (?, ?, ?)",
                (input, reading.timestamp, str(reading.value)),
            )
            self._db.execute("DELETE FROM readings WHERE ts <= ?", (reading.timestamp - self.retention,))
        return reading

    def window(self, input: str, since: int | None, until: int) -> list[Reading]:
        """Readings with ``since < ts <= until``, oldest first."""
        with self._lock:
            if since is None:
                rows = self._db.execute(
                    "SELECT ts, value FROM readings WHERE input = ? AND ts <= ? ORDER BY ts DESC LIMIT 1",
                    (input, until),
                ).fetchall()
            else:
                rows = self._db.execute(
                    "SELECT ts, value FROM readings WHERE input = ? AND ts > ? AND ts <= ? ORDER BY ts",
                    (input, since, until),
                ).fetchall()
        return [Reading(input, Decimal(v), ts) for ts, v in rows]

    def all(self, input: str) -> list[Reading]:
        with self._lock:
            rows = self._db.execute("SELECT ts, value FROM readings WHERE input = ? ORDER BY ts", (input,)).fetchall()
        return [Reading(input, Decimal(v), ts) for ts, v in rows]


def preselect(store: ReadingStore, input: str, preselector: Preselector, now: int) -> list[Reading]:
    window = preselector.window
    series = store.window(input, None if window is None else now - window, now)
    if not series:
        raise EmptyWindowError(f"no readings of {input!r} for {preselector.value}")
    return series


def preprocess(series: Sequence[Reading], fn: Preprocessor) -> Decimal:
    if not series:
        raise ValueError("cannot preprocess an empty series")
    values = [r.value for r in series]
    if fn is Preprocessor.MIN:
        return to_fixed(min(values))
    if fn is Preprocessor.MAX:
        return to_fixed(max(values))
    if fn is Preprocessor.SUM:
        return to_fixed(sum(values))
    return to_fixed(sum(values) / len(values))


class RateLimiter:
    def __init__(self, limit: int, window: int = 3600):
        self.limit = limit
        self.window = window
        self._events: dict[str, deque[int]] = defaultdict(deque)
        self._lock = threading.Lock()

    def exceeded(self, key: str, now: int) -> bool:
        with self._lock:
            events = self._events[key]
            while events and events[0] <= now - self.window:
                events.popleft()
            return len(events) >= self.limit

    def record(self, key: str, now: int) -> None:
        with self._lock:
            self._events[key].append(now)


class AccountabilityLog:
    """JSON-lines log; entries are only ever appended."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = None if path is None else Path(path)
        self._memory: list[str] = []
        self._lock = threading.Lock()
        self.healthy = True
        self.last_error: str | None = None

    def append(self, entry: AccountabilityEntry) -> None:
        line = canonical_serialize(entry.to_dict()).decode("utf-8")
        with self._lock:
            if self.path is None:
                self._memory.append(line)
                return
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def lines(self) -> list[str]:
        with self._lock:
            if self.path is None:
                return list(self._memory)
            if not self.path.exists():
                return []
            return [line for line in self.path.read_text(encoding="utf-8").splitlines() if line.strip()]

    def entries(self) -> list[AccountabilityEntry]:
        return [AccountabilityEntry.from_dict(json.loads(line)) for line in self.lines()]

    def __len__(self) -> int:
        return len(self.lines())

    def verify(self, gateway_cert: Certificate, anchors: Iterable[Certificate], now: int | None = None) -> list[tuple[int, str | None]]:
        """Re-check every entry; returns ``(index, problem)`` with ``problem=None`` when intact."""
        anchors = list(anchors)
        report = []
        for i, line in enumerate(self.lines()):
            try:
                entry = AccountabilityEntry.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError, ProtocolError) as exc:
                report.append((i, f"unparseable: {exc}"))
                continue
            report.append((i, verify_entry(entry, gateway_cert, anchors, now)))
        return report

    # test hook: lets the corruption tests rewrite history in place
    def _overwrite(self, lines: list[str]) -> None:
        with self._lock:
            if self.path is None:
                self._memory = list(lines)
            else:
                self.path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def verify_entry(
    entry: AccountabilityEntry, gateway_cert: Certificate, anchors: Sequence[Certificate], now: int | None = None
) -> str | None:
    payload = canonical_serialize(verify_envelope_payload(entry.session_id, entry.group, entry.request))
    if not verify(entry.sig_gateway, gateway_cert, payload):
        return "gateway signature does not verify"
    if entry.sig_peer is not None:
        if entry.reporter is None or entry.value is None:
            return "result signature recorded without reporter or value"
        if not verify_certificate(entry.reporter, anchors, now if now is not None else entry.request.timestamp):
            return "reporter certificate does not verify"
        if not verify(entry.sig_peer, entry.reporter, canonical_serialize(result_payload(entry.session_id, entry.value))):
            return "peer signature over result does not verify"
    return None


@dataclass
class _Session:
    request: ComputationRequest
    group: tuple[str, ...]
    sig_gateway: bytes
    contribution: Decimal
    created: float
    party: SessionParty | None = None
    plan: SessionPlan | None = None
    pending: list[dict] = field(default_factory=list)
    result: dict | None = None
    result_ready: threading.Event = field(default_factory=threading.Event)
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass(frozen=True)
class Decision:
    accepted: bool
    reason: Reason | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        if self.accepted:
            return {"status": "ok", "decision": "accept"}
        return {"status": "ok", "decision": "veto", "reason": self.reason.value, "detail": self.detail}


ACCEPT = Decision(True)


class PeerDaemon:
    def __init__(
        self,
        peer_id: str,
        identity: Identity,
        labels: Iterable[Label],
        inputs: Iterable[str],
        anchors: Iterable[Certificate],
        authorities: Iterable[Certificate],
        policy: LocalPolicy | None = None,
        protocols: Iterable[str] = ("sum",),
        store: ReadingStore | None = None,
        log_path: str | os.PathLike | None = None,
        backend: str = "additive",
        transport=None,
        address: str = "",
        clock=time.time,
        session_timeout: float = SESSION_TIMEOUT,
    ):
        self.peer_id = peer_id
        self.identity = identity
        self.labels = frozenset(labels)
        self.inputs = frozenset(inputs)
        self.protocols = frozenset(protocols)
        self.anchors = list(anchors)
        self.authorities = list(authorities)
        self.policy = policy if policy is not None else LocalPolicy()
        self.store = store if store is not None else ReadingStore()
        self.log = AccountabilityLog(log_path)
        self.backend = backend
        self.transport = transport
        self.address = address
        self.clock = clock
        self.session_timeout = session_timeout
        self.gateway_cert: Certificate | None = None
        self.rate = RateLimiter(self.policy.max_requests_per_client_per_hour)
        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()

    # -- identity and pairing ------------------------------------------------

    def profile(self) -> PeerProfile:
        return PeerProfile(self.peer_id, self.identity.certificate, self.labels, self.inputs, self.protocols, self.address)

    def register(self, gateway_address: str, attempts: int = 5, backoff: float = 0.5) -> Certificate:
        """Send our profile to the gateway and pin the certificate it answers with."""
        profile = self.profile().to_dict()
        body = {"profile": profile, "sig": self.identity.sign(canonical_serialize(profile)).hex()}
        delay = backoff
        for attempt in range(attempts):
            try:
                response = self.transport.post(gateway_address, "/peers/register", body)
                break
            except Unreachable:
                if attempt == attempts - 1:
                    raise
                log.warning("gateway %s unreachable, retrying in %.1fs", gateway_address, delay)
                time.sleep(delay)
                delay *= 2
        if response.get("status") != "ok":
            raise ConfigurationError(f"gateway rejected registration: {response.get('reason')} {response.get('detail', '')}")
        cert = Certificate.from_dict(response["gateway_certificate"])
        if not verify_certificate(cert, self.anchors, int(self.clock())):
            raise ConfigurationError("gateway certificate does not chain to a configured trust anchor")
        self.gateway_cert = cert
        return cert

    def ingest(self, input: str, value, timestamp: int | None = None) -> Reading:
        if input not in self.inputs:
            raise ValueError(f"{input!r} is not an advertised input")
        return self.store.append(input, value, int(self.clock()) if timestamp is None else timestamp)

    def contribution(self, request: ComputationRequest, now: int) -> Decimal:
        q = request.query
        return preprocess(preselect(self.store, q.input, q.preselector, now), q.preprocessor)

    # -- verification --------------------------------------------------------

    def verify_computation_request(self, r: ComputationRequest, session_group: Sequence[str], now: int) -> Decision:
        """Re-run the gateway's checks, then this peer's local policy.

        Accepting counts against the client's hourly rate limit.
        """
        try:
            check_computation_request(r, self.anchors, self.authorities, now)
            self._check_policy(r, session_group, now)
        except Failure as f:
            return Decision(False, f.reason, f.detail)
        self.rate.record(r.certificate.fingerprint, now)
        return ACCEPT

    def _check_policy(self, r: ComputationRequest, group: Sequence[str], now: int) -> None:
        p = self.policy
        client = r.certificate
        if p.allowed_client_fprs is not None and client.fingerprint not in p.allowed_client_fprs:
            raise Failure(Reason.CLIENT_NOT_ALLOWED, "client not on allowlist")
        if p.allowed_purposes is not None and client.purpose not in p.allowed_purposes:
            raise Failure(Reason.CLIENT_NOT_ALLOWED, f"purpose {client.purpose!r} not allowed")
        if len(set(group)) < p.min_group_size:
            raise Failure(Reason.GROUP_TOO_SMALL, f"group of {len(set(group))} below {p.min_group_size}")
        if abs(now - r.timestamp) > p.max_request_age:
            raise Failure(Reason.STALE_REQUEST, f"request age {now - r.timestamp}s exceeds {p.max_request_age}s")
        if self.rate.exceeded(client.fingerprint, now):
            raise Failure(Reason.RATE_LIMITED, f"more than {p.max_requests_per_client_per_hour} requests in the last hour")

    def _check_capability(self, r: ComputationRequest, group: Sequence[str]) -> None:
        q = r.query
        if self.peer_id not in group:
            raise Failure(Reason.NOT_SELECTED, "peer is not part of the session group")
        if not eval_predicate(q.predicate, self.labels):
            raise Failure(Reason.NOT_SELECTED, "peer labels do not satisfy the predicate")
        if q.input not in self.inputs or q.protocol not in self.protocols or q.protocol not in SUPPORTED_PROTOCOLS:
            raise Failure(Reason.UNSUPPORTED, f"cannot provide {q.input!r} via {q.protocol!r}")

    # -- network handlers ----------------------------------------------------

    def handle(self, method: str, path: str, body: dict | None):
        parts = path.strip("/").split("/")
        if method == "GET" and parts == ["health"]:
            return self.health()
        if method == "POST" and parts == ["sessions", "verify"]:
            return self.handle_verify(body)
        if method == "POST" and len(parts) == 3 and parts[0] == "sessions":
            if parts[2] == "compute":
                return self.handle_compute(parts[1], body)
            if parts[2] == "share":
                return self.handle_share(parts[1], body)
        raise KeyError(path)

    def health(self) -> dict:
        with self._lock:
            active = len(self._sessions)
        return {
            "status": "ok",
            "peer_id": self.peer_id,
            "log_healthy": self.log.healthy,
            "log_error": self.log.last_error,
            "active_sessions": active,
        }

    def _gateway_signed(self, payload: dict, sig_hex: str) -> bool:
        if self.gateway_cert is None:
            return False
        try:
            sig = bytes.fromhex(sig_hex)
        except (TypeError, ValueError):
            return False
        return verify(sig, self.gateway_cert, canonical_serialize(payload))

    def handle_verify(self, envelope: dict) -> dict:
        now = int(self.clock())
        try:
            session_id = envelope["session_id"]
            group = tuple(envelope["body"]["group"])
            request = ComputationRequest.from_dict(envelope["body"]["request"])
            sig_hex = envelope["sig_gateway"]
        except (KeyError, TypeError, ProtocolError) as exc:
            return Decision(False, Reason.MALFORMED, str(exc)).to_dict()
        if not self._gateway_signed(verify_envelope_payload(session_id, group, request), sig_hex):
            return Decision(False, Reason.BAD_GATEWAY_SIG, "forwarded request not signed by the pinned gateway").to_dict()
        try:
            self._check_capability(request, group)
        except Failure as f:
            return Decision(False, f.reason, f.detail).to_dict()
        decision = self.verify_computation_request(request, group, now)
        if not decision.accepted:
            log.info("peer %s vetoes session %s: %s", self.peer_id, session_id, decision.reason)
            return decision.to_dict()
        try:
            value = self.contribution(request, now)
        except EmptyWindowError as exc:
            return Decision(False, Reason.NO_DATA, str(exc)).to_dict()
        with self._lock:
            self._expire_sessions()
            self._sessions[session_id] = _Session(request, group, bytes.fromhex(sig_hex), value, time.monotonic())
        return decision.to_dict()

    def _expire_sessions(self) -> None:
        cutoff = time.monotonic() - 6 * self.session_timeout
        for sid in [sid for sid, s in self._sessions.items() if s.created < cutoff]:
            del self._sessions[sid]

    def _send(self, plan: SessionPlan, messages: list[dict]) -> None:
        for msg in messages:
            target = plan.participant(msg["to"])
            self.transport.post(target.address, f"/sessions/{plan.session_id}/share", msg)

    def handle_compute(self, session_id: str, envelope: dict) -> dict:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            return {"status": "failure", "reason": Reason.SESSION_ERROR.value, "detail": "unknown session"}
        compute_payload = {"type": "compute", "session_id": session_id, "body": envelope.get("body")}
        if not self._gateway_signed(compute_payload, envelope.get("sig_gateway", "")):
            return {"status": "failure", "reason": Reason.BAD_GATEWAY_SIG.value, "detail": "compute order not signed"}
        try:
            plan = SessionPlan.from_dict(envelope["body"]["plan"])
        except (KeyError, TypeError, ValueError) as exc:
            return {"status": "failure", "reason": Reason.MALFORMED.value, "detail": str(exc)}
        if plan.session_id != session_id or set(plan.peer_ids) != set(session.group):
            return {"status": "failure", "reason": Reason.SESSION_ERROR.value, "detail": "plan does not match verified group"}
        if plan.protocol != session.request.query.protocol:
            return {"status": "failure", "reason": Reason.SESSION_ERROR.value, "detail": "protocol mismatch"}
        try:
            return self._run_session(session_id, session, plan)
        except (SessionError, Unreachable) as exc:
            log.error("peer %s: session %s failed: %s", self.peer_id, session_id, exc)
            return {"status": "failure", "reason": Reason.SESSION_ERROR.value, "detail": str(exc)}
        finally:
            with self._lock:
                self._sessions.pop(session_id, None)

    def _run_session(self, session_id: str, session: _Session, plan: SessionPlan) -> dict:
        party = SessionParty(session_id, self.peer_id, plan.peer_ids, self.backend)
        with session.lock:
            session.party = party
            session.plan = plan
            buffered, session.pending = session.pending, []
        out = party.start(session.contribution)
        for msg in buffered:
            out.extend(party.receive(msg))
        self._send(plan, out)
        if not party.done.wait(self.session_timeout):
            raise SessionError(self.peer_id, "timed out waiting for partials")
        reporter = plan.reporter
        client_cert = session.request.certificate
        response = {"status": "ok", "session_id": session_id}
        if reporter.peer_id == self.peer_id:
            result = seal_result(party.value, session_id, self.identity, client_cert)
            notice = {
                "session_id": session_id,
                "from": self.peer_id,
                "round": "result",
                "value": str(result.value),
                "sig_peer": result.sig_peer.hex(),
                "ciphertext": result.ciphertext.hex(),
            }
            for other in plan.participants:
                if other.peer_id != self.peer_id:
                    self.transport.post(other.address, f"/sessions/{session_id}/share", {**notice, "to": other.peer_id})
            self._record(session_id, session, result.ciphertext, str(result.value), result.sig_peer, self.identity.certificate)
            response["ciphertext"] = result.ciphertext.hex()
            return response
        if not session.result_ready.wait(self.session_timeout):
            raise SessionError(reporter.peer_id, "reporter did not distribute the signed result")
        notice = session.result
        value = str(party.value)
        sig_peer = bytes.fromhex(notice["sig_peer"])
        if notice["value"] != value or not verify(
            sig_peer, reporter.certificate, canonical_serialize(result_payload(session_id, value))
        ):
            raise SessionError(reporter.peer_id, "signed result does not match the reconstructed value")
        self._record(session_id, session, bytes.fromhex(notice["ciphertext"]), value, sig_peer, reporter.certificate)
        return response

    def handle_share(self, session_id: str, msg: dict) -> dict:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            return {"status": "failure", "reason": Reason.SESSION_ERROR.value, "detail": "unknown session"}
        if msg.get("from") not in session.group or msg.get("to") != self.peer_id:
            return {"status": "failure", "reason": Reason.SESSION_ERROR.value, "detail": "sender not in session"}
        if msg.get("round") == "result":
            session.result = msg
            session.result_ready.set()
            return {"status": "ok"}
        with session.lock:
            party, plan = session.party, session.plan
            if party is None:
                session.pending.append(msg)
                return {"status": "ok"}
        try:
            out = party.receive(msg)
        except (SessionError, ValueError, KeyError) as exc:
            return {"status": "failure", "reason": Reason.SESSION_ERROR.value, "detail": str(exc)}
        self._send(plan, out)
        return {"status": "ok"}

    def _record(self, session_id, session: _Session, ciphertext, value, sig_peer, reporter_cert) -> None:
        entry = AccountabilityEntry(
            session_id=session_id,
            group=tuple(sorted(session.group)),
            request=session.request,
            sig_gateway=session.sig_gateway,
            result_value=ciphertext,
            value=value,
            sig_peer=sig_peer,
            reporter=reporter_cert,
        )
        self.record_accountability(entry)

    def record_accountability(self, entry: AccountabilityEntry) -> None:
        """Append to the log; a storage failure is logged loudly and flagged but not raised."""
        try:
            self.log.append(entry)
        except OSError as exc:
            self.log.healthy = False
            self.log.last_error = str(exc)
            log.error("peer %s: accountability log write failed: %s", self.peer_id, exc)
