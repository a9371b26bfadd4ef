"""Domain types shared by gateway, peers and clients.

Queries select peers through a small conjunctive predicate language over
peer labels. Every signed message has a ``signing_payload()`` (its own
signature left out) and a ``to_dict()`` (full wire form); signatures are
always computed over ``canonical_serialize(signing_payload())``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from enum import Enum
from typing import Iterable, Sequence, Union

from .canonical import ProtocolError, canonical_serialize
from .crypto import Certificate, CertificateError

AND = "∧"
IN = "∈"
EQ = "="
_FORBIDDEN_VALUE_CHARS = set("=∈∧[],")
_FORBIDDEN_KEY_CHARS = _FORBIDDEN_VALUE_CHARS | {"!", "<", ">", "~", ":"}

FIXED_POINT_PLACES = 3
_QUANTUM = Decimal(1).scaleb(-FIXED_POINT_PLACES)


def to_fixed(value: Union[int, float, str, Decimal]) -> Decimal:
    """Round to three decimal places, half to even."""
    if isinstance(value, float):
        value = repr(value)
    try:
        d = Decimal(value)
    except InvalidOperation as exc:
        raise ValueError(f"not a number: {value!r}") from exc
    if not d.is_finite():
        raise ValueError(f"not a finite number: {value!r}")
    return d.quantize(_QUANTUM, rounding=ROUND_HALF_EVEN)


def fixed_to_int(value: Decimal) -> int:
    """Scale a fixed-point value to an integer count of thousandths."""
    return int(to_fixed(value).scaleb(FIXED_POINT_PLACES))


def int_to_fixed(scaled: int) -> Decimal:
    return to_fixed(Decimal(scaled).scaleb(-FIXED_POINT_PLACES))


class PredicateSyntaxError(ValueError):
    def __init__(self, position: int, message: str):
        super().__init__(f"at position {position}: {message}")
        self.position = position
        self.message = message


def _check_key(key: str) -> None:
    if not key or any(c.isspace() for c in key) or _FORBIDDEN_KEY_CHARS & set(key):
        raise ValueError(f"invalid label key {key!r}")


def _check_value(value: str) -> None:
    if not value or value != value.strip() or _FORBIDDEN_VALUE_CHARS & set(value):
        raise ValueError(f"invalid label value {value!r}")


@dataclass(frozen=True, order=True)
class Label:
    key: str
    value: str

    def __post_init__(self):
        _check_key(self.key)
        _check_value(self.value)

    def to_dict(self) -> dict:
        return {"key": self.key, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Label":
        return cls(d["key"], d["value"])


def labels_from_mapping(mapping: dict) -> frozenset[Label]:
    return frozenset(Label(str(k), str(v)) for k, v in mapping.items())


@dataclass(frozen=True)
class Eq:
    key: str
    value: str

    def __post_init__(self):
        _check_key(self.key)
        _check_value(self.value)

    def holds(self, labels: frozenset[Label] | set[Label]) -> bool:
        return Label(self.key, self.value) in labels

    def sort_key(self) -> tuple:
        return (self.key, EQ, (self.value,))

    def __str__(self) -> str:
        return f"{self.key} {EQ} {self.value}"


@dataclass(frozen=True)
class In:
    key: str
    values: tuple[str, ...]

    def __post_init__(self):
        _check_key(self.key)
        if not self.values:
            raise ValueError("membership list must be non-empty")
        for v in self.values:
            _check_value(v)
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"duplicate values in membership list for {self.key!r}")
        object.__setattr__(self, "values", tuple(sorted(self.values)))

    def holds(self, labels) -> bool:
        return any(Label(self.key, v) in labels for v in self.values)

    def sort_key(self) -> tuple:
        return (self.key, IN, self.values)

    def __str__(self) -> str:
        return f"{self.key} {IN} [{', '.join(self.values)}]"


Atom = Union[Eq, In]


@dataclass(frozen=True)
class Predicate:
    """Conjunction of atoms, stored in canonical order."""

    atoms: tuple[Atom, ...]

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("predicate needs at least one atom")
        object.__setattr__(self, "atoms", tuple(sorted(self.atoms, key=lambda a: a.sort_key())))

    def canonical(self) -> str:
        return f" {AND} ".join(str(a) for a in self.atoms)

    __str__ = canonical


_KEY_RE = re.compile(r"[^\s=∈∧\[\],!<>~:]+")
_OP_RE = re.compile(r"[=∈!<>~:]+|in\b|not\b")


def parse_predicate(text: str) -> Predicate:
    """Parse ``"k = v ∧ k2 ∈ [a, b]"``.

    Raises PredicateSyntaxError carrying the character offset of the
    offending token.
    """
    if not text.strip():
        raise PredicateSyntaxError(0, "empty predicate")
    atoms: list[Atom] = []
    start = 0
    for segment in text.split(AND):
        atoms.append(_parse_atom(segment, start))
        start += len(segment) + len(AND)
    return Predicate(tuple(atoms))


def _parse_atom(segment: str, offset: int) -> Atom:
    pos = len(segment) - len(segment.lstrip())
    if pos == len(segment):
        raise PredicateSyntaxError(offset + pos, "empty condition")
    m = _KEY_RE.match(segment, pos)
    if not m:
        raise PredicateSyntaxError(offset + pos, "expected label key")
    key = m.group()
    pos = m.end()
    while pos < len(segment) and segment[pos].isspace():
        pos += 1
    op = _OP_RE.match(segment, pos)
    if not op:
        raise PredicateSyntaxError(offset + pos, "expected operator '=' or '∈'")
    if op.group() not in (EQ, IN):
        raise PredicateSyntaxError(offset + pos, f"unknown operator {op.group()!r}")
    rest_start = op.end()
    rest = segment[rest_start:]
    body = rest.strip()
    body_pos = offset + rest_start + (len(rest) - len(rest.lstrip()))
    if op.group() == EQ:
        if not body:
            raise PredicateSyntaxError(body_pos, "missing value")
        try:
            return Eq(key, body)
        except ValueError as exc:
            raise PredicateSyntaxError(body_pos, str(exc)) from None
    if not (body.startswith("[") and body.endswith("]")):
        raise PredicateSyntaxError(body_pos, "membership needs a bracketed list")
    inner = body[1:-1]
    if not inner.strip():
        raise PredicateSyntaxError(body_pos, "empty membership list")
    values = [v.strip() for v in inner.split(",")]
    try:
        return In(key, tuple(values))
    except ValueError as exc:
        raise PredicateSyntaxError(body_pos, str(exc)) from None


def eval_predicate(p: Predicate, labels: Iterable[Label]) -> bool:
    labels = labels if isinstance(labels, (set, frozenset)) else frozenset(labels)
    return all(atom.holds(labels) for atom in p.atoms)


def build_label_superset(peers: Iterable) -> frozenset[Label]:
    """Union of ``labels`` over peer profiles (anything with a ``labels`` attribute)."""
    out: set[Label] = set()
    for peer in peers:
        out.update(peer.labels)
    return frozenset(out)


class Preselector(Enum):
    LAST_VALUE = "last value"
    LAST_HOUR = "last hour"
    LAST_6_HOURS = "last 6 hours"
    LAST_24_HOURS = "last 24 hours"

    @property
    def window(self) -> int | None:
        return _WINDOWS[self]


_WINDOWS = {
    Preselector.LAST_VALUE: None,
    Preselector.LAST_HOUR: 3600,
    Preselector.LAST_6_HOURS: 6 * 3600,
    Preselector.LAST_24_HOURS: 24 * 3600,
}


class Preprocessor(Enum):
    MIN = "min"
    MAX = "max"
    SUM = "sum"
    AVERAGE = "avg"

    @classmethod
    def parse(cls, text: str) -> "Preprocessor":
        if text == "average":
            return cls.AVERAGE
        return cls(text)


@dataclass(frozen=True)
class Query:
    predicate: Predicate
    preselector: Preselector
    preprocessor: Preprocessor
    protocol: str
    input: str

    def __post_init__(self):
        if not self.protocol or not self.input:
            raise ValueError("protocol and input must be non-empty")

    def canonical(self) -> str:
        return " | ".join(
            (self.predicate.canonical(), self.preselector.value, self.preprocessor.value, self.protocol, self.input)
        )

    def to_dict(self) -> dict:
        return {
            "predicate": self.predicate.canonical(),
            "preselector": self.preselector.value,
            "preprocessor": self.preprocessor.value,
            "protocol": self.protocol,
            "input": self.input,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        try:
            return cls(
                predicate=parse_predicate(d["predicate"]),
                preselector=Preselector(d["preselector"]),
                preprocessor=Preprocessor.parse(d["preprocessor"]),
                protocol=str(d["protocol"]),
                input=str(d["input"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed query: {exc}") from exc

    def describe(self) -> str:
        window = self.preselector.value
        return (
            f"{self.protocol} over peers where {self.predicate.canonical()} "
            f"of the {self.preprocessor.value} of {self.input} ({window})"
        )


def query_matches(granted: Query, requested: Query) -> bool:
    return granted.canonical() == requested.canonical()


def sorted_queries(queries: Iterable[Query]) -> tuple[Query, ...]:
    unique = {q.canonical(): q for q in queries}
    return tuple(unique[k] for k in sorted(unique))


def _sig(d: dict, name: str) -> bytes:
    value = d.get(name)
    return bytes.fromhex(value) if value else b""


@dataclass(frozen=True)
class Grant:
    queries: tuple[Query, ...]
    holder: str
    purpose: str
    not_before: int
    not_after: int
    sig_issuer: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "queries", sorted_queries(self.queries))
        if not self.queries:
            raise ValueError("grant must permit at least one query")
        if self.not_before >= self.not_after:
            raise ValueError("grant not_before must precede not_after")

    def signing_payload(self) -> dict:
        return {
            "queries": [q.to_dict() for q in self.queries],
            "holder": self.holder,
            "purpose": self.purpose,
            "not_before": self.not_before,
            "not_after": self.not_after,
        }

    def to_dict(self) -> dict:
        return {**self.signing_payload(), "sig_issuer": self.sig_issuer.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "Grant":
        try:
            return cls(
                queries=tuple(Query.from_dict(q) for q in d["queries"]),
                holder=str(d["holder"]),
                purpose=str(d["purpose"]),
                not_before=int(d["not_before"]),
                not_after=int(d["not_after"]),
                sig_issuer=_sig(d, "sig_issuer"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed grant: {exc}") from exc

    def permits(self, query: Query) -> bool:
        return any(query_matches(q, query) for q in self.queries)


@dataclass(frozen=True)
class GrantRequest:
    certificate: Certificate
    queries: tuple[Query, ...]
    sig_client: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "queries", sorted_queries(self.queries))
        if not self.queries:
            raise ValueError("grant request must name at least one query")

    def signing_payload(self) -> dict:
        return {"certificate": self.certificate.to_dict(), "queries": [q.to_dict() for q in self.queries]}

    def to_dict(self) -> dict:
        return {**self.signing_payload(), "sig_client": self.sig_client.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "GrantRequest":
        try:
            return cls(
                certificate=Certificate.from_dict(d["certificate"]),
                queries=tuple(Query.from_dict(q) for q in d["queries"]),
                sig_client=_sig(d, "sig_client"),
            )
        except (KeyError, TypeError, ValueError, CertificateError) as exc:
            raise ProtocolError(f"malformed grant request: {exc}") from exc

    def signed(self, identity) -> "GrantRequest":
        return replace(self, sig_client=identity.sign(canonical_serialize(self.signing_payload())))


@dataclass(frozen=True)
class ComputationRequest:
    query: Query
    certificate: Certificate
    grant: Grant
    timestamp: int
    sig_client: bytes = b""

    def signing_payload(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "certificate": self.certificate.to_dict(),
            "grant": self.grant.to_dict(),
            "timestamp": self.timestamp,
        }

    def to_dict(self) -> dict:
        return {**self.signing_payload(), "sig_client": self.sig_client.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "ComputationRequest":
        try:
            return cls(
                query=Query.from_dict(d["query"]),
                certificate=Certificate.from_dict(d["certificate"]),
                grant=Grant.from_dict(d["grant"]),
                timestamp=int(d["timestamp"]),
                sig_client=_sig(d, "sig_client"),
            )
        except (KeyError, TypeError, ValueError, CertificateError) as exc:
            raise ProtocolError(f"malformed computation request: {exc}") from exc

    def signed(self, identity) -> "ComputationRequest":
        return replace(self, sig_client=identity.sign(canonical_serialize(self.signing_payload())))


@dataclass(frozen=True)
class AccountabilityEntry:
    """One accepted session as recorded by a peer.

    ``sig_gateway`` covers the verify envelope (session id, group, request).
    ``result_value`` is the client-sealed result blob; ``value`` keeps the
    aggregate locally so ``sig_peer`` can be re-checked later.
    """

    session_id: str
    group: tuple[str, ...]
    request: ComputationRequest
    sig_gateway: bytes
    result_value: bytes | None = None
    value: str | None = None
    sig_peer: bytes | None = None
    reporter: Certificate | None = None

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "group": list(self.group),
            "request": self.request.to_dict(),
            "sig_gateway": self.sig_gateway.hex(),
            "result_value": None if self.result_value is None else self.result_value.hex(),
            "value": self.value,
            "sig_peer": None if self.sig_peer is None else self.sig_peer.hex(),
            "reporter": None if self.reporter is None else self.reporter.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccountabilityEntry":
        def opt_hex(name):
            return None if d.get(name) is None else bytes.fromhex(d[name])

        return cls(
            session_id=d["session_id"],
            group=tuple(d["group"]),
            request=ComputationRequest.from_dict(d["request"]),
            sig_gateway=bytes.fromhex(d["sig_gateway"]),
            result_value=opt_hex("result_value"),
            value=d.get("value"),
            sig_peer=opt_hex("sig_peer"),
            reporter=None if d.get("reporter") is None else Certificate.from_dict(d["reporter"]),
        )


def verify_envelope_payload(session_id: str, group: Sequence[str], request: ComputationRequest) -> dict:
    """The part of a gateway ``verify`` envelope covered by ``sig_gateway``."""
    return {
        "type": "verify",
        "session_id": session_id,
        "body": {"group": list(group), "request": request.to_dict()},
    }


def result_payload(session_id: str, value: str) -> dict:
    """What the reporting peer signs for a finished session."""
    return {"session_id": session_id, "value": value}
