"""Shared builders for deployments and per-check request fixtures."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from decimal import Decimal
from fractions import Fraction
from typing import Callable

from smcgate.backend import open_result
from smcgate.crypto import generate_identity
from smcgate.gateway import AccessRule
from smcgate.model import ComputationRequest, Grant, GrantRequest, Query, parse_predicate, Preselector, Preprocessor
from smcgate.peer import LocalPolicy
from smcgate.reasons import Failure, Reason
from smcgate.testbed import INPUT, heater_query


def other_query() -> Query:
    return Query(parse_predicate("type = heater"), Preselector.LAST_VALUE, Preprocessor.MAX, "sum", INPUT)


def grant_for(bed, client, queries, now=None) -> Grant:
    r = GrantRequest(client.identity.certificate, tuple(queries)).signed(client.identity)
    return bed.gateway.handle_grant_request(r, now)


def computation_request(client, query, grant, timestamp=None) -> ComputationRequest:
    ts = int(time.time()) if timestamp is None else timestamp
    return ComputationRequest(query, client.identity.certificate, grant, ts).signed(client.identity)


def oracle_sum(bed, query: Query, now: int) -> Decimal:
    """Recompute the expected result from the seeded readings with exact rationals."""
    window = query.preselector.window
    total = Fraction(0)
    for peer_id, peer in bed.peers.items():
        labels = {(l.key, l.value) for l in peer.labels}
        if not all(_atom_holds(a, labels) for a in query.predicate.atoms):
            continue
        series = [Fraction(v) for t, v in bed.readings[peer_id] if t <= now and (window is None or t > now - window)]
        if window is None:
            series = series[-1:]
        if query.preprocessor is Preprocessor.AVERAGE:
            contribution = sum(series) / len(series)
        elif query.preprocessor is Preprocessor.SUM:
            contribution = sum(series)
        elif query.preprocessor is Preprocessor.MIN:
            contribution = min(series)
        else:
            contribution = max(series)
        total += _round3(contribution)
    return Decimal(total.numerator) / Decimal(total.denominator)


def _atom_holds(atom, labels) -> bool:
    values = getattr(atom, "values", None) or (atom.value,)
    return any((atom.key, v) in labels for v in values)


def _round3(x: Fraction) -> Fraction:
    # round half to even at three decimals
    scaled = x * 1000
    floor = scaled.numerator // scaled.denominator
    rest = scaled - floor
    if rest > Fraction(1, 2) or (rest == Fraction(1, 2) and floor % 2):
        floor += 1
    return Fraction(floor, 1000)


@dataclass
class CheckFixture:
    name: str
    expected: Reason | None
    run: Callable[[], Failure | None]
    detail: Reason | None = None

    def passes(self) -> bool:
        failure = self.run()
        if self.expected is None:
            return failure is None
        if failure is None or failure.reason is not self.expected:
            return False
        return self.detail is None or failure.detail == self.detail.value


def _outcome(fn) -> Failure | None:
    try:
        fn()
    except Failure as f:
        return f
    return None


def check_fixtures(make_bed) -> list[CheckFixture]:
    """One fixture per verification check where exactly that check fails, plus the golden run."""
    now = int(time.time())
    bed = make_bed(10, queries=[heater_query(), other_query()], rules=[AccessRule(queries=frozenset({heater_query().canonical()}))])
    gw = bed.gateway
    client = bed.make_client("alice", "energy monitoring")
    query = heater_query()
    grant = grant_for(bed, client, [query], now)
    good = computation_request(client, query, grant, now)

    def grant_check(r):
        return lambda: _outcome(lambda: gw.handle_grant_request(r, now))

    def comp_check(r, at=now):
        return lambda: _outcome(lambda: gw.check_computation_request(r, at))

    foreign_anchor = generate_identity("foreign-anchor")
    foreign = generate_identity("mallory", "energy monitoring", issuer=foreign_anchor)
    bad_cert = GrantRequest(foreign.certificate, (query,)).signed(foreign)
    unsigned = GrantRequest(client.identity.certificate, (query,))
    bad_sig = replace(unsigned, sig_client=foreign.sign(_payload(unsigned)))
    denied = GrantRequest(client.identity.certificate, (query, other_query())).signed(client.identity)

    bob = bed.make_client("bob", "energy monitoring")
    holder = computation_request(client, query, grant_for(bed, bob, [query], now), now)
    tampered = replace(good, timestamp=good.timestamp + 1)
    rogue = generate_identity("rogue-authority", issuer=bed.anchor)
    rogue_grant = replace(grant, sig_issuer=rogue.sign(_payload(grant)))
    forged_issuer = computation_request(client, query, rogue_grant, now)
    not_granted = computation_request(client, other_query(), grant, now)

    strict = make_bed(10, policy=lambda: LocalPolicy(allowed_purposes={"billing"}))
    carol = strict.make_client("carol", "energy monitoring")
    carol_req = computation_request(carol, query, grant_for(strict, carol, [query], now), now)

    def peer_policy():
        return _outcome(lambda: strict.gateway.handle_computation_request(carol_req))

    def golden():
        client.request_grant([query])
        result = client.compute(query)
        assert result.value == oracle_sum(bed, query, int(time.time()))
        return None

    return [
        CheckFixture("client_certificate", Reason.BAD_CERT, grant_check(bad_cert)),
        CheckFixture("grant_request_signature", Reason.BAD_SIG, grant_check(bad_sig)),
        CheckFixture("access_policy", Reason.POLICY_DENIED, grant_check(denied)),
        CheckFixture("holder_binding", Reason.HOLDER_MISMATCH, comp_check(holder)),
        CheckFixture("request_signature", Reason.BAD_REQUEST_SIG, comp_check(tampered)),
        CheckFixture("grant_not_before", Reason.GRANT_NOT_YET_VALID, comp_check(good, grant.not_before - 10)),
        CheckFixture("grant_not_after", Reason.GRANT_EXPIRED, comp_check(good, grant.not_after + 1)),
        CheckFixture("grant_issuer", Reason.BAD_ISSUER, comp_check(forged_issuer)),
        CheckFixture("query_inclusion", Reason.QUERY_NOT_GRANTED, comp_check(not_granted)),
        CheckFixture("local_policy", Reason.PEER_VETO, peer_policy, detail=Reason.CLIENT_NOT_ALLOWED),
        CheckFixture("golden", None, golden),
    ]


def _payload(obj) -> bytes:
    from smcgate.canonical import canonical_serialize

    return canonical_serialize(obj.signing_payload())


def open_with(client, ciphertext, session_id=None):
    return open_result(client.identity, ciphertext, client.anchors, int(time.time()), session_id)
