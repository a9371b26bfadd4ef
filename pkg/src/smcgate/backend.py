"""Computation backends for approved sessions.

Two interchangeable backends implement the ``sum`` protocol:

* ``MockBackend`` - every peer broadcasts its plaintext contribution. This is
  for load evaluation only; it gives no input privacy.
* ``AdditiveShareBackend`` - additive secret sharing over GF(2^61 - 1). Each
  peer splits its fixed-point contribution into n random shares, keeps one,
  sends one to every other peer, then publishes only the sum of the shares it
  holds. Summing the published partials reconstructs the total.

Both are driven by the same per-peer state machine (``SessionParty``), which
the peer daemon also uses when sessions run over the network.
"""

from __future__ import annotations

import random
import secrets
import threading
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Iterable, Mapping, Sequence

from .canonical import canonical_serialize, loads
from .crypto import Certificate, DecryptionError, Identity, encrypt_for, verify, verify_certificate
from .model import fixed_to_int, int_to_fixed, result_payload, to_fixed

FIELD_MODULUS = 2**61 - 1
SUPPORTED_PROTOCOLS = frozenset({"sum"})
MODES = ("mock", "additive")


class UnsupportedProtocolError(ValueError):
    pass


class FieldRangeError(ValueError):
    pass


class SessionError(RuntimeError):
    def __init__(self, peer_id: str, message: str):
        super().__init__(f"peer {peer_id}: {message}")
        self.peer_id = peer_id


class ResultVerificationError(Exception):
    """A decrypted result failed signature or binding checks."""


@dataclass(frozen=True)
class Participant:
    peer_id: str
    address: str
    certificate: Certificate

    def to_dict(self) -> dict:
        return {"peer_id": self.peer_id, "address": self.address, "certificate": self.certificate.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Participant":
        return cls(d["peer_id"], d["address"], Certificate.from_dict(d["certificate"]))


@dataclass(frozen=True)
class SessionPlan:
    session_id: str
    participants: tuple[Participant, ...]
    protocol: str
    client_certificate: Certificate | None = None
    contributions: Mapping[str, Decimal] | None = None

    def __post_init__(self):
        object.__setattr__(self, "participants", tuple(sorted(self.participants, key=lambda p: p.peer_id)))
        if not self.participants:
            raise ValueError("session needs at least one participant")

    @property
    def peer_ids(self) -> tuple[str, ...]:
        return tuple(p.peer_id for p in self.participants)

    @property
    def reporter(self) -> Participant:
        return self.participants[0]

    def participant(self, peer_id: str) -> Participant:
        for p in self.participants:
            if p.peer_id == peer_id:
                return p
        raise KeyError(peer_id)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "participants": [p.to_dict() for p in self.participants],
            "protocol": self.protocol,
            "client_certificate": None if self.client_certificate is None else self.client_certificate.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionPlan":
        client = d.get("client_certificate")
        return cls(
            session_id=d["session_id"],
            participants=tuple(Participant.from_dict(p) for p in d["participants"]),
            protocol=d["protocol"],
            client_certificate=None if client is None else Certificate.from_dict(client),
        )


@dataclass(frozen=True)
class ComputationResult:
    value: Decimal
    session_id: str
    sig_peer: bytes = b""
    ciphertext: bytes | None = None


def embed(value: Decimal, n_parties: int) -> int:
    """Fixed-point scale ``value`` and map it into the field.

    The bound keeps any sum of ``n_parties`` such values unambiguous.
    """
    scaled = fixed_to_int(value)
    bound = (FIELD_MODULUS - 1) // (2 * max(n_parties, 1))
    if abs(scaled) > bound:
        raise FieldRangeError(f"contribution {value} exceeds field range for {n_parties} parties")
    return scaled % FIELD_MODULUS


def unembed(element: int) -> Decimal:
    element %= FIELD_MODULUS
    if element > FIELD_MODULUS // 2:
        element -= FIELD_MODULUS
    return int_to_fixed(element)


def split_shares(secret: int, n: int, randbelow: Callable[[int], int] = secrets.randbelow) -> list[int]:
    """n uniformly random field elements summing to ``secret`` mod q."""
    shares = [randbelow(FIELD_MODULUS) for _ in range(n - 1)]
    shares.append((secret - sum(shares)) % FIELD_MODULUS)
    return shares


def encode_element(x: int) -> str:
    return x.to_bytes(8, "big").hex()


def decode_element(s: str) -> int:
    x = int.from_bytes(bytes.fromhex(s), "big")
    if x >= FIELD_MODULUS:
        raise ValueError("share outside field")
    return x


class Transcript:
    """Append-only record of messages, for instrumentation in tests and audits."""

    def __init__(self):
        self.messages: list[dict] = []
        self._lock = threading.Lock()

    def record(self, src: str, dst: str, kind: str, payload) -> None:
        with self._lock:
            self.messages.append({"src": src, "dst": dst, "kind": kind, "payload": payload})

    def sent_by(self, src: str) -> list[dict]:
        return [m for m in self.messages if m["src"] == src]


class SessionParty:
    """One peer's view of a ``sum`` session.

    ``start`` and ``receive`` return the outgoing messages the caller has to
    deliver; the party never sends anything itself. Once every partial is in,
    ``value`` holds the reconstructed total.
    """

    def __init__(
        self,
        session_id: str,
        peer_id: str,
        peer_ids: Sequence[str],
        mode: str = "additive",
        randbelow: Callable[[int], int] = secrets.randbelow,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown backend mode {mode!r}")
        self.session_id = session_id
        self.peer_id = peer_id
        self.peer_ids = tuple(sorted(peer_ids))
        if peer_id not in self.peer_ids:
            raise ValueError(f"{peer_id} is not a participant")
        self.mode = mode
        self._randbelow = randbelow
        self._started = False
        self._inputs: dict[str, int] = {}
        self._partials: dict[str, int] = {}
        self._lock = threading.Lock()
        self.done = threading.Event()
        self.value: Decimal | None = None

    def _message(self, to: str, round_: str, element: int) -> dict:
        return {
            "session_id": self.session_id,
            "from": self.peer_id,
            "to": to,
            "round": round_,
            "share": encode_element(element),
        }

    def start(self, contribution: Decimal) -> list[dict]:
        n = len(self.peer_ids)
        element = embed(contribution, n)
        with self._lock:
            if self._started:
                raise SessionError(self.peer_id, "session already started")
            self._started = True
            if self.mode == "mock" or n == 1:
                return self._publish_partial(element)
            shares = split_shares(element, n, self._randbelow)
            out = []
            for other, share in zip(self.peer_ids, shares):
                if other == self.peer_id:
                    self._inputs[other] = share
                else:
                    out.append(self._message(other, "input", share))
            out.extend(self._maybe_publish())
            return out

    def receive(self, msg: dict) -> list[dict]:
        sender = msg["from"]
        if msg["session_id"] != self.session_id or msg["to"] != self.peer_id:
            raise SessionError(sender, "message not addressed to this session party")
        if sender not in self.peer_ids or sender == self.peer_id:
            raise SessionError(sender, "sender is not another participant")
        element = decode_element(msg["share"])
        with self._lock:
            if msg["round"] == "input":
                if sender in self._inputs:
                    raise SessionError(sender, "duplicate input share")
                self._inputs[sender] = element
                return self._maybe_publish()
            if msg["round"] == "partial":
                if sender in self._partials:
                    raise SessionError(sender, "duplicate partial")
                self._partials[sender] = element
                self._maybe_finish()
                return []
        raise SessionError(sender, f"unknown round {msg['round']!r}")

    def _maybe_publish(self) -> list[dict]:
        if self.peer_id in self._partials or len(self._inputs) < len(self.peer_ids):
            return []
        return self._publish_partial(sum(self._inputs.values()) % FIELD_MODULUS)

    def _publish_partial(self, element: int) -> list[dict]:
        self._partials[self.peer_id] = element
        out = [self._message(other, "partial", element) for other in self.peer_ids if other != self.peer_id]
        self._maybe_finish()
        return out

    def _maybe_finish(self) -> None:
        if len(self._partials) == len(self.peer_ids) and self.value is None:
            self.value = unembed(sum(self._partials.values()))
            self.done.set()


def seal_result(value: Decimal, session_id: str, reporter: Identity, client_cert: Certificate) -> ComputationResult:
    """Sign ``(session_id, value)`` as the reporting peer and encrypt for the client."""
    value_str = str(to_fixed(value))
    sig = reporter.sign(canonical_serialize(result_payload(session_id, value_str)))
    sealed = {
        "session_id": session_id,
        "value": value_str,
        "sig_peer": sig.hex(),
        "reporter": reporter.certificate.to_dict(),
    }
    ciphertext = encrypt_for(client_cert, canonical_serialize(sealed))
    return ComputationResult(to_fixed(value), session_id, sig, ciphertext)


def open_result(
    identity: Identity,
    ciphertext: bytes,
    anchors: Iterable[Certificate],
    now: int | None = None,
    expected_session_id: str | None = None,
) -> ComputationResult:
    """Decrypt a sealed result and check the reporting peer's signature.

    Raises DecryptionError for tampered or foreign ciphertexts and
    ResultVerificationError when the signature or session binding fails.
    """
    body = loads(identity.decrypt(ciphertext))
    try:
        reporter = Certificate.from_dict(body["reporter"])
        session_id = body["session_id"]
        value_str = body["value"]
        sig = bytes.fromhex(body["sig_peer"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ResultVerificationError(f"malformed result: {exc}") from exc
    if expected_session_id is not None and session_id != expected_session_id:
        raise ResultVerificationError(f"result belongs to session {session_id}, expected {expected_session_id}")
    if not verify_certificate(reporter, anchors, now):
        raise ResultVerificationError("reporting peer certificate does not verify")
    if not verify(sig, reporter, canonical_serialize(result_payload(session_id, value_str))):
        raise ResultVerificationError("peer signature over result does not verify")
    return ComputationResult(Decimal(value_str), session_id, sig, ciphertext)


def check_protocol(protocol: str) -> None:
    if protocol not in SUPPORTED_PROTOCOLS:
        raise UnsupportedProtocolError(f"unsupported protocol {protocol!r}")


class _LocalBackend:
    mode = "additive"

    def __init__(self, rng: random.Random | None = None, transcript: Transcript | None = None):
        self._randbelow = rng.randrange if rng is not None else secrets.randbelow
        self.transcript = transcript

    def compute(self, plan: SessionPlan, reporter: Identity | None = None) -> ComputationResult:
        """Run the session among in-memory parties.

        ``plan.contributions`` must cover every participant. When a reporter
        identity and client certificate are given, the result is sealed.
        """
        check_protocol(plan.protocol)
        contributions = plan.contributions or {}
        missing = [pid for pid in plan.peer_ids if pid not in contributions]
        if missing:
            raise SessionError(missing[0], "no contribution")
        parties = {
            pid: SessionParty(plan.session_id, pid, plan.peer_ids, self.mode, self._randbelow) for pid in plan.peer_ids
        }
        # range errors surface here, before anything is sent
        for pid in plan.peer_ids:
            embed(to_fixed(contributions[pid]), len(parties))
        outbox: list[dict] = []
        for pid, party in parties.items():
            outbox.extend(party.start(to_fixed(contributions[pid])))
        while outbox:
            msg = outbox.pop(0)
            if self.transcript is not None:
                self.transcript.record(msg["from"], msg["to"], "share", msg)
            outbox.extend(parties[msg["to"]].receive(msg))
        values = {party.value for party in parties.values()}
        if len(values) != 1 or None in values:
            raise SessionError(plan.reporter.peer_id, "parties disagree on the reconstructed value")
        value = values.pop()
        if reporter is not None and plan.client_certificate is not None:
            return seal_result(value, plan.session_id, reporter, plan.client_certificate)
        return ComputationResult(value, plan.session_id)


class MockBackend(_LocalBackend):
    """Plaintext exchange of contributions. Evaluation only: no input privacy."""

    mode = "mock"


class AdditiveShareBackend(_LocalBackend):
    mode = "additive"


def additive_share_sum(
    plan: SessionPlan,
    reporter: Identity | None = None,
    rng: random.Random | None = None,
    transcript: Transcript | None = None,
) -> ComputationResult:
    if len(plan.participants) < 2:
        raise ValueError("additive sharing needs at least two participants")
    return AdditiveShareBackend(rng, transcript).compute(plan, reporter)


def make_backend(mode: str, **kwargs) -> _LocalBackend:
    if mode == "mock":
        return MockBackend(**kwargs)
    if mode == "additive":
        return AdditiveShareBackend(**kwargs)
    raise ValueError(f"unknown backend {mode!r}")


__all__ = [
    "FIELD_MODULUS",
    "AdditiveShareBackend",
    "ComputationResult",
    "DecryptionError",
    "FieldRangeError",
    "MockBackend",
    "Participant",
    "ResultVerificationError",
    "SessionError",
    "SessionParty",
    "SessionPlan",
    "Transcript",
    "UnsupportedProtocolError",
    "additive_share_sum",
    "make_backend",
    "open_result",
    "seal_result",
]
