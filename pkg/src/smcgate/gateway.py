"""The gateway: publishes queries, issues grants and orchestrates sessions.

The gateway never touches readings or plaintext results. It verifies client
requests, picks the peers a query's predicate selects, forwards the signed
request to each of them, and relays the result ciphertext produced by the
reporting peer back to the client.

All request handling goes through one bounded FIFO served by a fixed pool
of worker threads; when the FIFO is full, new requests are rejected at once.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from collections import OrderedDict, deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .backend import Participant, SessionPlan
from .canonical import ProtocolError, canonical_serialize
from .crypto import Certificate, Identity, verify, verify_certificate
from .model import (
    ComputationRequest,
    Eq,
    Grant,
    GrantRequest,
    Predicate,
    Preprocessor,
    Preselector,
    Query,
    build_label_superset,
    eval_predicate,
    sorted_queries,
    verify_envelope_payload,
)
from .peer import PeerProfile
from .reasons import Failure, Reason
from .transport import Unreachable
from .verification import check_computation_request, check_grant_request

log = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 100
DEFAULT_WORKERS = 8
DEFAULT_GRANT_LIFETIME = 3600
DEFAULT_PEER_TIMEOUT = 10.0
DEFAULT_MIN_GROUP = 3
LIVENESS_WINDOW = 60.0


@dataclass(frozen=True)
class AccessRule:
    """Permit ``client`` (a fingerprint or ``"*"``) to request ``queries``.

    ``queries`` holds canonical query strings, or ``"*"`` for every published
    query. ``hours`` optionally restricts the rule to a UTC time-of-day range
    given in seconds after midnight; ranges may wrap past midnight.
    """

    client: str = "*"
    queries: frozenset[str] = frozenset({"*"})
    hours: tuple[int, int] | None = None

    def applies(self, query: Query, cert: Certificate, now: int) -> bool:
        if self.client != "*" and self.client != cert.fingerprint:
            return False
        if "*" not in self.queries and query.canonical() not in self.queries:
            return False
        if self.hours is not None:
            start, end = self.hours
            t = now % 86400
            inside = start <= t < end if start <= end else (t >= start or t < end)
            if not inside:
                return False
        return True

    @classmethod
    def from_dict(cls, d: dict) -> "AccessRule":
        hours = d.get("hours")
        return cls(
            client=d.get("client", "*"),
            queries=frozenset(d.get("queries", ["*"])),
            hours=None if hours is None else (int(hours[0]), int(hours[1])),
        )


@dataclass(frozen=True)
class QueryTemplate:
    input: str
    protocol: str = "sum"
    preselector: Preselector = Preselector.LAST_VALUE
    preprocessor: Preprocessor = Preprocessor.AVERAGE

    def instantiate(self, predicate: Predicate) -> Query:
        return Query(predicate, self.preselector, self.preprocessor, self.protocol, self.input)

    @classmethod
    def from_dict(cls, d: dict) -> "QueryTemplate":
        return cls(
            input=d["input"],
            protocol=d.get("protocol", "sum"),
            preselector=Preselector(d.get("preselector", "last value")),
            preprocessor=Preprocessor.parse(d.get("preprocessor", "avg")),
        )


@dataclass
class PeerRecord:
    profile: PeerProfile
    last_seen: float


class BoundedRequestQueue:
    """FIFO with a hard capacity; ``offer`` never blocks."""

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False

    def offer(self, item) -> tuple[bool, int]:
        """Enqueue unless full. Returns ``(accepted, depth seen on arrival)``."""
        with self._cond:
            depth = len(self._items)
            if depth >= self.capacity or self._closed:
                return False, depth
            self._items.append(item)
            self._cond.notify()
            return True, depth

    def take(self, timeout: float | None = None):
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                return None
            if not self._items:
                return None
            return self._items.popleft()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


class PendingRequest:
    """A request travelling through the queue, with its timing marks."""

    def __init__(self, kind: str, payload):
        self.id = uuid.uuid4().hex
        self.kind = kind
        self.payload = payload
        self.t_offer = time.perf_counter()
        self.t_start: float | None = None
        self.t_end: float | None = None
        self.depth_on_arrival = 0
        self.dropped = False
        self.accept_notice: dict | None = None
        self.response: dict | None = None
        self._accepted = threading.Event()
        self._done = threading.Event()
        self._cond = threading.Condition()

    def notify_accept(self, notice: dict) -> None:
        with self._cond:
            self.accept_notice = notice
            self._cond.notify_all()

    def finish(self, response: dict) -> None:
        with self._cond:
            self.response = response
            self.t_end = time.perf_counter()
            self._done.set()
            self._cond.notify_all()

    def wait(self, timeout: float | None = None) -> dict | None:
        self._done.wait(timeout)
        return self.response

    def wait_accept_or_done(self, timeout: float | None = None) -> None:
        with self._cond:
            self._cond.wait_for(lambda: self.accept_notice is not None or self.response is not None, timeout)

    @property
    def service_time(self) -> float | None:
        if self.t_start is None or self.t_end is None:
            return None
        return self.t_end - self.t_start

    @property
    def total_time(self) -> float | None:
        return None if self.t_end is None else self.t_end - self.t_offer


@dataclass
class InformResult:
    accepted: bool
    veto: Reason | None = None
    detail: str = ""
    latencies: dict[str, float] = field(default_factory=dict)


class Gateway:
    def __init__(
        self,
        identity: Identity,
        anchors: Iterable[Certificate],
        transport=None,
        authority: Identity | None = None,
        authorities: Iterable[Certificate] | None = None,
        queries: Iterable[Query] = (),
        rules: Iterable[AccessRule] = (),
        templates: Iterable[QueryTemplate] = (),
        enumerate_predicates: bool = False,
        min_publishable_group: int = DEFAULT_MIN_GROUP,
        grant_lifetime: int = DEFAULT_GRANT_LIFETIME,
        peer_timeout: float = DEFAULT_PEER_TIMEOUT,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        workers: int = DEFAULT_WORKERS,
        liveness_window: float = LIVENESS_WINDOW,
        clock: Callable[[], float] = time.time,
        name: str = "gateway",
    ):
        self.identity = identity
        self.anchors = list(anchors)
        self.transport = transport
        self.authority = authority or identity
        self.authorities = list(authorities) if authorities is not None else [self.authority.certificate]
        self.manual_queries = sorted_queries(queries)
        self.rules = list(rules)
        self.templates = list(templates)
        self.enumerate_predicates = enumerate_predicates
        self.min_publishable_group = min_publishable_group
        self.grant_lifetime = grant_lifetime
        self.peer_timeout = peer_timeout
        self.liveness_window = liveness_window
        self.clock = clock
        self.name = name
        self.queue = BoundedRequestQueue(queue_capacity)
        self.n_workers = workers
        self._workers: list[threading.Thread] = []
        self._busy = 0
        self._busy_lock = threading.Lock()
        self._registry: dict[str, PeerRecord] = {}
        self._registry_lock = threading.Lock()
        self._published: tuple[Query, ...] = ()
        self._published_keys: frozenset[str] = frozenset()
        self._results: OrderedDict[str, dict] = OrderedDict()
        self._results_lock = threading.Lock()
        self._probe_stop = threading.Event()
        self.refresh_queries()

    # -- registry and catalog ------------------------------------------------

    def register_peer(self, profile: PeerProfile, sig: bytes) -> None:
        now = int(self.clock())
        if not verify_certificate(profile.certificate, self.anchors, now):
            raise Failure(Reason.BAD_CERT, "peer certificate does not chain to a trust anchor")
        if not verify(sig, profile.certificate, canonical_serialize(profile.to_dict())):
            raise Failure(Reason.BAD_SIG, "profile signature does not verify")
        if not profile.address:
            raise Failure(Reason.MALFORMED, "peer profile lacks an address")
        with self._registry_lock:
            existing = self._registry.get(profile.peer_id)
            if existing and existing.profile.certificate.fingerprint != profile.certificate.fingerprint:
                raise Failure(Reason.BAD_CERT, f"peer id {profile.peer_id!r} is bound to another certificate")
            self._registry[profile.peer_id] = PeerRecord(profile, self.clock())
        self.refresh_queries()

    def peers(self) -> list[PeerProfile]:
        with self._registry_lock:
            return [r.profile for r in self._registry.values()]

    def live_peers(self) -> list[PeerProfile]:
        cutoff = self.clock() - self.liveness_window
        with self._registry_lock:
            return [r.profile for r in self._registry.values() if r.last_seen >= cutoff]

    def mark_seen(self, peer_id: str) -> None:
        with self._registry_lock:
            if peer_id in self._registry:
                self._registry[peer_id].last_seen = self.clock()

    def probe_peers(self) -> dict[str, bool]:
        """Health-check every registered peer, refreshing liveness."""
        status = {}
        for profile in self.peers():
            try:
                ok = self.transport.get(profile.address, "/health", timeout=self.peer_timeout).get("status") == "ok"
            except (Unreachable, ProtocolError, OSError):
                ok = False
            if ok:
                self.mark_seen(profile.peer_id)
            status[profile.peer_id] = ok
        return status

    def _eligible(self, query: Query, peers: Iterable[PeerProfile]) -> list[PeerProfile]:
        return [
            p
            for p in peers
            if eval_predicate(query.predicate, p.labels) and query.input in p.inputs and query.protocol in p.protocols
        ]

    def refresh_queries(self) -> tuple[Query, ...]:
        peers = self.peers()
        candidates = list(self.manual_queries)
        if self.enumerate_predicates:
            for label in sorted(build_label_superset(peers)):
                predicate = Predicate((Eq(label.key, label.value),))
                candidates.extend(t.instantiate(predicate) for t in self.templates)
        published = sorted_queries(q for q in candidates if len(self._eligible(q, peers)) >= self.min_publishable_group)
        self._published, self._published_keys = published, frozenset(q.canonical() for q in published)
        return published

    @property
    def queries(self) -> tuple[Query, ...]:
        return self._published

    def handle_metadata_request(self) -> list[dict]:
        return [{**q.to_dict(), "canonical": q.canonical(), "description": q.describe()} for q in self._published]

    # -- grants ----------------------------------------------------------------

    def access_decision(self, query: Query, cert: Certificate, now: int) -> bool:
        """Deny unless the query is published and some rule permits it now."""
        if query.canonical() not in self._published_keys:
            return False
        return any(rule.applies(query, cert, now) for rule in self.rules)

    def handle_grant_request(self, r: GrantRequest, now: int | None = None) -> Grant:
        now = int(self.clock()) if now is None else now
        check_grant_request(r, self.anchors, lambda q, c: self.access_decision(q, c, now), now)
        grant = Grant(
            queries=r.queries,
            holder=r.certificate.fingerprint,
            purpose=r.certificate.purpose,
            not_before=now,
            not_after=now + self.grant_lifetime,
        )
        sig = self.authority.sign(canonical_serialize(grant.signing_payload()))
        return Grant(grant.queries, grant.holder, grant.purpose, grant.not_before, grant.not_after, sig)

    # -- computations ------------------------------------------------------------

    def translate_request(self, query: Query, client_cert: Certificate | None = None, session_id: str | None = None) -> SessionPlan:
        peers = self._eligible(query, self.live_peers())
        if len(peers) < self.min_publishable_group:
            raise Failure(Reason.GROUP_TOO_SMALL, f"{len(peers)} eligible peers, need {self.min_publishable_group}")
        return SessionPlan(
            session_id=session_id or uuid.uuid4().hex,
            participants=tuple(Participant(p.peer_id, p.address, p.certificate) for p in peers),
            protocol=query.protocol,
            client_certificate=client_cert,
        )

    def _envelope(self, type_: str, session_id: str, body: dict) -> dict:
        payload = {"type": type_, "session_id": session_id, "body": body}
        return {**payload, "sig_gateway": self.identity.sign(canonical_serialize(payload)).hex()}

    def verify_envelope(self, plan: SessionPlan, request: ComputationRequest) -> dict:
        payload = verify_envelope_payload(plan.session_id, plan.peer_ids, request)
        return {**payload, "sig_gateway": self.identity.sign(canonical_serialize(payload)).hex()}

    def inform_peers(self, plan: SessionPlan, request: ComputationRequest) -> InformResult:
        """Forward the request to every participant at once; proceed only if all accept."""
        envelope = self.verify_envelope(plan, request)
        latencies: dict[str, float] = {}

        def ask(p: Participant):
            t0 = time.perf_counter()
            try:
                answer = self.transport.post(p.address, "/sessions/verify", envelope, timeout=self.peer_timeout)
            finally:
                latencies[p.peer_id] = time.perf_counter() - t0
            return answer

        pool = ThreadPoolExecutor(max_workers=len(plan.participants), thread_name_prefix="inform")
        futures = {pool.submit(ask, p): p for p in plan.participants}
        pending = set(futures)
        deadline = time.monotonic() + self.peer_timeout
        try:
            while pending:
                done, pending = wait(pending, timeout=max(0.0, deadline - time.monotonic()), return_when=FIRST_COMPLETED)
                if not done:
                    return InformResult(False, Reason.TIMEOUT, f"{len(pending)} peers did not answer", latencies)
                for fut in done:
                    peer = futures[fut]
                    try:
                        answer = fut.result()
                    except (Unreachable, ProtocolError, OSError) as exc:
                        return InformResult(False, Reason.TIMEOUT, f"{peer.peer_id} unreachable: {exc}", latencies)
                    if answer.get("decision") != "accept":
                        reason = Reason(answer.get("reason", Reason.MALFORMED.value))
                        return InformResult(False, reason, answer.get("detail", ""), latencies)
            return InformResult(True, latencies=latencies)
        finally:
            pool.shutdown(wait=False)

    def run_computation(self, plan: SessionPlan) -> bytes:
        """Tell all participants to run the session; returns the reporter's ciphertext."""
        envelope = self._envelope("compute", plan.session_id, {"plan": plan.to_dict()})
        timeout = 2 * self.peer_timeout

        def order(p: Participant):
            return self.transport.post(p.address, f"/sessions/{plan.session_id}/compute", envelope, timeout=timeout)

        pool = ThreadPoolExecutor(max_workers=len(plan.participants), thread_name_prefix="compute")
        futures = {pool.submit(order, p): p for p in plan.participants}
        try:
            done, pending = wait(futures, timeout=timeout)
            if pending:
                raise Failure(Reason.PEER_TIMEOUT, f"{len(pending)} peers did not finish the session")
            ciphertext = None
            for fut, p in futures.items():
                try:
                    answer = fut.result()
                except (Unreachable, ProtocolError, OSError) as exc:
                    raise Failure(Reason.SESSION_ERROR, f"a participant failed: {exc}") from None
                if answer.get("status") != "ok":
                    raise Failure(Reason.SESSION_ERROR, answer.get("detail", "participant failure"))
                if p.peer_id == plan.reporter.peer_id:
                    ciphertext = answer.get("ciphertext")
            if not ciphertext:
                raise Failure(Reason.SESSION_ERROR, "reporting peer returned no result")
            return bytes.fromhex(ciphertext)
        finally:
            pool.shutdown(wait=False)

    def check_computation_request(self, r: ComputationRequest, now: int) -> None:
        check_computation_request(r, self.anchors, self.authorities, now)

    def handle_computation_request(
        self,
        r: ComputationRequest,
        now: int | None = None,
        on_accept: Callable[[dict], None] | None = None,
    ) -> dict:
        """Verify, notify acceptance, run the session and return the sealed result.

        Raises Failure with the first failing check, PEER_VETO when any peer
        refuses, or PEER_TIMEOUT when a peer does not answer.
        """
        now = int(self.clock()) if now is None else now
        self.check_computation_request(r, now)
        session_id = uuid.uuid4().hex
        if on_accept is not None:
            on_accept({"status": "accepted", "session_id": session_id})
        plan = self.translate_request(r.query, r.certificate, session_id)
        informed = self.inform_peers(plan, r)
        if not informed.accepted:
            if informed.veto is Reason.TIMEOUT:
                raise Failure(Reason.PEER_TIMEOUT, informed.detail)
            raise Failure(Reason.PEER_VETO, informed.veto.value if informed.veto else "")
        ciphertext = self.run_computation(plan)
        return {"status": "ok", "session_id": session_id, "ciphertext": ciphertext.hex()}

    # -- request queue and workers -----------------------------------------------

    def start(self, probe_interval: float | None = None) -> "Gateway":
        for i in range(self.n_workers):
            t = threading.Thread(target=self._work, name=f"{self.name}-worker-{i}", daemon=True)
            t.start()
            self._workers.append(t)
        if probe_interval:
            threading.Thread(target=self._probe_loop, args=(probe_interval,), daemon=True).start()
        return self

    def stop(self) -> None:
        self.queue.close()
        self._probe_stop.set()
        for t in self._workers:
            t.join(timeout=5)
        self._workers.clear()

    def _probe_loop(self, interval: float) -> None:
        while not self._probe_stop.wait(interval):
            self.probe_peers()

    def submit(self, kind: str, payload) -> PendingRequest:
        item = PendingRequest(kind, payload)
        accepted, depth = self.queue.offer(item)
        item.depth_on_arrival = depth
        if not accepted:
            item.dropped = True
            item.finish(Failure(Reason.REQUEST_DROPPED, f"queue full ({self.queue.capacity})").to_dict())
        return item

    def stats(self) -> dict:
        with self._busy_lock:
            busy = self._busy
        return {"queue_depth": len(self.queue), "queue_capacity": self.queue.capacity, "workers_busy": busy, "workers": self.n_workers}

    def _work(self) -> None:
        while True:
            item = self.queue.take()
            if item is None:
                return
            with self._busy_lock:
                self._busy += 1
            item.t_start = time.perf_counter()
            try:
                response = self._process(item)
            except Failure as f:
                response = f.to_dict()
            except ProtocolError as exc:
                response = Failure(Reason.MALFORMED, str(exc)).to_dict()
            except Exception as exc:  # keep the worker alive
                log.exception("gateway worker crashed on %s", item.kind)
                response = Failure(Reason.SESSION_ERROR, repr(exc)).to_dict()
            finally:
                with self._busy_lock:
                    self._busy -= 1
            if item.kind == "computation" and item.accept_notice is not None:
                self._store_result(item.accept_notice["session_id"], response)
            item.finish(response)

    def _process(self, item: PendingRequest) -> dict:
        if item.kind == "grant":
            r = item.payload if isinstance(item.payload, GrantRequest) else GrantRequest.from_dict(item.payload)
            return {"status": "ok", "grant": self.handle_grant_request(r).to_dict()}
        if item.kind == "computation":
            r = item.payload if isinstance(item.payload, ComputationRequest) else ComputationRequest.from_dict(item.payload)
            return self.handle_computation_request(r, on_accept=item.notify_accept)
        raise ProtocolError(f"unknown request kind {item.kind!r}")

    def _store_result(self, session_id: str, response: dict) -> None:
        with self._results_lock:
            self._results[session_id] = response
            while len(self._results) > 1000:
                self._results.popitem(last=False)

    # -- wire interface ------------------------------------------------------------

    def handle(self, method: str, path: str, body: dict | None):
        parts = path.strip("/").split("/")
        if method == "GET" and parts == ["metadata"]:
            return {"status": "ok", "queries": self.handle_metadata_request()}
        if method == "GET" and parts == ["stats"]:
            return {"status": "ok", **self.stats()}
        if method == "GET" and parts == ["health"]:
            return {"status": "ok"}
        if method == "POST" and parts == ["peers", "register"]:
            return self._handle_register(body)
        if method == "POST" and parts == ["grants"]:
            return self.submit("grant", body).wait()
        if method == "POST" and parts == ["computations"]:
            return self._stream_computation(self.submit("computation", body))
        if method == "GET" and len(parts) == 2 and parts[0] == "computations":
            with self._results_lock:
                result = self._results.get(parts[1])
            return result or {"status": "pending", "session_id": parts[1]}
        raise KeyError(path)

    def _handle_register(self, body: dict) -> dict:
        try:
            profile = PeerProfile.from_dict(body["profile"])
            sig = bytes.fromhex(body["sig"])
        except (KeyError, TypeError, ValueError, ProtocolError) as exc:
            return Failure(Reason.MALFORMED, str(exc)).to_dict()
        try:
            self.register_peer(profile, sig)
        except Failure as f:
            return f.to_dict()
        return {"status": "ok", "gateway_certificate": self.identity.certificate.to_dict()}

    def _stream_computation(self, item: PendingRequest):
        if item.dropped:
            return item.response

        def messages():
            item.wait_accept_or_done()
            if item.accept_notice is not None:
                yield item.accept_notice
            yield item.wait()

        return messages()
