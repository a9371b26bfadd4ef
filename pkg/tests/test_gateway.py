import threading
import time

import pytest

from smcgate.crypto import generate_identity
from smcgate.gateway import AccessRule, BoundedRequestQueue, Gateway, QueryTemplate
from smcgate.model import GrantRequest, Preprocessor, Preselector, parse_predicate, Query, labels_from_mapping
from smcgate.peer import LocalPolicy, PeerDaemon
from smcgate.reasons import Failure, Reason
from smcgate.testbed import INPUT, heater_query

from helpers import check_fixtures, computation_request, grant_for, oracle_sum, other_query


def kitchen_labels(i):
    return {"type": "heater", "roomtype": "kitchen" if i < 4 else "office"}


def kitchen_query():
    return Query(parse_predicate("roomtype = kitchen"), Preselector.LAST_VALUE, Preprocessor.AVERAGE, "sum", INPUT)


def test_metadata_empty(anchor):
    gw = Gateway(generate_identity("gw", issuer=anchor), [anchor.certificate])
    assert gw.handle("GET", "/metadata", None) == {"status": "ok", "queries": []}


def test_metadata_lists_heater_query_fields(testbed):
    bed = testbed(5)
    [entry] = bed.gateway.handle("GET", "/metadata", None)["queries"]
    assert entry["predicate"] == "roomtype ∈ [kitchen, meetingroom] ∧ type = heater"
    assert entry["preselector"] == "last 6 hours"
    assert entry["preprocessor"] == "avg"
    assert entry["protocol"] == "sum"
    assert entry["input"] == INPUT


def test_metadata_ordered_by_canonical(testbed):
    bed = testbed(5, queries=[other_query(), heater_query()])
    keys = [q["canonical"] for q in bed.gateway.handle_metadata_request()]
    assert keys == sorted(keys) and len(keys) == 2


def test_enumeration_follows_registry(testbed):
    template = QueryTemplate(INPUT)
    bed = testbed(10, labels=kitchen_labels, queries=[], templates=[template], enumerate_predicates=True)
    preds = {q.predicate.canonical() for q in bed.gateway.queries}
    assert preds == {"roomtype = kitchen", "roomtype = office", "type = heater"}
    other = testbed(10, labels=lambda i: {"type": "heater", "roomtype": "kitchen" if i < 2 else "lab"},
                    queries=[], templates=[template], enumerate_predicates=True)
    other_preds = {q.predicate.canonical() for q in other.gateway.queries}
    # two kitchen peers fall below the publication threshold
    assert other_preds == {"roomtype = lab", "type = heater"}


def test_enumeration_off_keeps_manual_list(testbed):
    bed = testbed(10, queries=[heater_query()], templates=[QueryTemplate(INPUT)])
    assert bed.gateway.queries == (heater_query(),)


def test_threshold_excludes_small_groups(testbed):
    bed = testbed(10, labels=lambda i: {"type": "heater", "roomtype": "kitchen" if i == 0 else "office"},
                  queries=[kitchen_query()])
    assert bed.gateway.queries == ()


def test_check_fixtures(testbed):
    fixtures = check_fixtures(testbed)
    assert len(fixtures) == 11
    for f in fixtures:
        assert f.passes(), f.name


def test_check_order_first_failure_reported(testbed):
    bed = testbed(5)
    client = bed.make_client()
    bob = bed.make_client("bob")
    now = int(time.time())
    grant = grant_for(bed, bob, [heater_query()], now)
    # holder mismatch and expiry and wrong query all at once: holder wins
    r = computation_request(client, other_query(), grant, now)
    with pytest.raises(Failure) as exc:
        bed.gateway.check_computation_request(r, grant.not_after + 10)
    assert exc.value.reason is Reason.HOLDER_MISMATCH


def test_grant_fields(testbed):
    bed = testbed(5)
    client = bed.make_client("alice", "energy monitoring")
    now = int(time.time())
    grant = grant_for(bed, client, [heater_query()], now)
    assert grant.holder == client.identity.fingerprint
    assert grant.purpose == "energy monitoring"
    assert (grant.not_before, grant.not_after) == (now, now + 3600)
    assert grant.queries == (heater_query(),)
    assert client.valid_grant(grant, now)


def test_grant_all_or_nothing_names_query(testbed):
    rules = [AccessRule(queries=frozenset({heater_query().canonical()}))]
    bed = testbed(5, queries=[heater_query(), other_query()], rules=rules)
    client = bed.make_client()
    with pytest.raises(Failure) as exc:
        grant_for(bed, client, [heater_query(), other_query()])
    assert exc.value.reason is Reason.POLICY_DENIED
    assert exc.value.detail == other_query().canonical()


def test_deny_by_default(testbed):
    bed = testbed(5, rules=[])
    with pytest.raises(Failure) as exc:
        grant_for(bed, bed.make_client(), [heater_query()])
    assert exc.value.reason is Reason.POLICY_DENIED


def test_unpublished_query_denied(testbed):
    bed = testbed(5)
    with pytest.raises(Failure) as exc:
        grant_for(bed, bed.make_client(), [other_query()])
    assert exc.value.reason is Reason.POLICY_DENIED


def test_rule_by_fingerprint_and_hours(testbed):
    bed = testbed(5, rules=[])
    alice, bob = bed.make_client("alice"), bed.make_client("bob")
    bed.gateway.rules = [AccessRule(client=alice.identity.fingerprint)]
    grant_for(bed, alice, [heater_query()])
    with pytest.raises(Failure):
        grant_for(bed, bob, [heater_query()])
    rule = AccessRule(hours=(22 * 3600, 2 * 3600))
    cert = alice.identity.certificate
    assert rule.applies(heater_query(), cert, 23 * 3600)
    assert rule.applies(heater_query(), cert, 3600)
    assert not rule.applies(heater_query(), cert, 12 * 3600)


def test_certificate_without_purpose_rejected(testbed):
    bed = testbed(5)
    ident = generate_identity("nopurpose", "", issuer=bed.anchor)
    r = GrantRequest(ident.certificate, (heater_query(),)).signed(ident)
    with pytest.raises(Failure) as exc:
        bed.gateway.handle_grant_request(r)
    assert exc.value.reason is Reason.BAD_CERT


def test_translate_selects_exactly_matching(testbed):
    bed = testbed(30, labels=kitchen_labels, queries=[kitchen_query()])
    plan = bed.gateway.translate_request(kitchen_query())
    assert plan.peer_ids == ("peer-00", "peer-01", "peer-02", "peer-03")


def test_translate_filters_capability(testbed):
    bed = testbed(30, labels=kitchen_labels, queries=[kitchen_query()])
    for i in (4, 5):
        ident = generate_identity(f"temp-{i}", issuer=bed.anchor)
        bed.add_peer(PeerDaemon(
            f"temp-{i}", ident, labels_from_mapping({"roomtype": "kitchen"}), ["temperature"],
            anchors=[bed.anchor.certificate], authorities=[], transport=bed.network.transport(f"temp-{i}"),
            address=f"temp-{i}",
        ))
    assert len(bed.gateway.translate_request(kitchen_query()).participants) == 4


def test_translate_no_live_matches(testbed):
    bed = testbed(5)
    bed.gateway.liveness_window = -1
    with pytest.raises(Failure) as exc:
        bed.gateway.translate_request(heater_query())
    assert exc.value.reason is Reason.GROUP_TOO_SMALL


def test_probe_refreshes_liveness(testbed):
    bed = testbed(5)
    bed.network.detach("peer-03")
    status = bed.gateway.probe_peers()
    assert status["peer-03"] is False and status["peer-00"] is True


class Hanging:
    """Peer stand-in that never answers in time."""

    def __init__(self, delay):
        self.delay = delay
        self.release = threading.Event()

    def handle(self, method, path, body):
        self.release.wait(self.delay)
        return {"status": "ok", "decision": "accept"}


def test_one_veto_aborts_without_backend(testbed):
    bed = testbed(10)
    bed.peers["peer-04"].policy = LocalPolicy(allowed_purposes={"billing"})
    client = bed.make_client()
    client.request_grant([heater_query()])
    calls = []
    original = bed.gateway.run_computation
    bed.gateway.run_computation = lambda plan: calls.append(plan) or original(plan)
    now = int(time.time())
    r = computation_request(client, heater_query(), client.grants.get(heater_query()), now)
    with pytest.raises(Failure) as exc:
        bed.gateway.handle_computation_request(r)
    assert exc.value.reason is Reason.PEER_VETO and exc.value.detail == "CLIENT_NOT_ALLOWED"
    assert calls == []
    assert all(len(p.log) == 0 for p in bed.peers.values())


def test_unresponsive_peer_times_out(testbed):
    bed = testbed(5, peer_timeout=0.5)
    hang = Hanging(5)
    bed.network.attach("peer-02", hang)
    client = bed.make_client()
    client.request_grant([heater_query()])
    r = computation_request(client, heater_query(), client.grants.get(heater_query()))
    t0 = time.monotonic()
    with pytest.raises(Failure) as exc:
        bed.gateway.handle_computation_request(r)
    elapsed = time.monotonic() - t0
    hang.release.set()
    assert exc.value.reason is Reason.PEER_TIMEOUT
    assert 0.4 < elapsed < 2.0


def test_unreachable_peer_is_timeout(testbed):
    bed = testbed(5)
    bed.network.detach("peer-01")
    client = bed.make_client()
    client.request_grant([heater_query()])
    r = computation_request(client, heater_query(), client.grants.get(heater_query()))
    with pytest.raises(Failure) as exc:
        bed.gateway.handle_computation_request(r)
    assert exc.value.reason is Reason.PEER_TIMEOUT


def test_inform_reports_latencies(testbed):
    bed = testbed(6)
    client = bed.make_client()
    client.request_grant([heater_query()])
    r = computation_request(client, heater_query(), client.grants.get(heater_query()))
    plan = bed.gateway.translate_request(r.query, r.certificate)
    result = bed.gateway.inform_peers(plan, r)
    assert result.accepted and set(result.latencies) == set(plan.peer_ids)


def test_end_to_end_value(testbed):
    bed = testbed(10, backend="additive")
    client = bed.make_client()
    client.request_grant([heater_query()])
    result = client.compute(heater_query())
    assert result.value == oracle_sum(bed, heater_query(), int(time.time()))


def test_poll_endpoint(testbed):
    bed = testbed(5)
    client = bed.make_client()
    client.request_grant([heater_query()])
    r = computation_request(client, heater_query(), client.grants.get(heater_query()))
    messages = list(bed.gateway.handle("POST", "/computations", r.to_dict()))
    assert messages[0]["status"] == "accepted"
    sid = messages[0]["session_id"]
    polled = bed.gateway.handle("GET", f"/computations/{sid}", None)
    assert polled == messages[-1] and polled["status"] == "ok"
    assert bed.gateway.handle("GET", "/computations/unknown", None)["status"] == "pending"


def test_unknown_route(testbed):
    bed = testbed(3)
    with pytest.raises(KeyError):
        bed.gateway.handle("GET", "/nope", None)


def test_queue_offer_reports_depth():
    q = BoundedRequestQueue(2)
    assert q.offer("a") == (True, 0)
    assert q.offer("b") == (True, 1)
    assert q.offer("c") == (False, 2)
    assert q.take() == "a"
    assert q.offer("d") == (True, 1)


def test_overflow_dropped_immediately(testbed):
    bed = testbed(3, start=False, queue_capacity=5)
    client = bed.make_client()
    payload = GrantRequest(client.identity.certificate, (heater_query(),)).signed(client.identity).to_dict()
    items = [bed.gateway.submit("grant", payload) for _ in range(8)]
    assert [i.dropped for i in items] == [False] * 5 + [True] * 3
    assert all(i.response["reason"] == "REQUEST_DROPPED" for i in items[5:])
    assert [i.depth_on_arrival for i in items] == [0, 1, 2, 3, 4, 5, 5, 5]
    bed.gateway.start()
    assert all(i.wait(10)["status"] == "ok" for i in items[:5])


def test_queue_never_exceeds_capacity(testbed):
    bed = testbed(3, queue_capacity=10, workers=2)
    client = bed.make_client()
    payload = GrantRequest(client.identity.certificate, (heater_query(),)).signed(client.identity).to_dict()
    depths = []
    items = []
    for _ in range(300):
        items.append(bed.gateway.submit("grant", payload))
        depths.append(bed.gateway.stats()["queue_depth"])
    for i in items:
        i.wait(30)
    assert max(depths) <= 10
    ok = sum(i.response["status"] == "ok" for i in items)
    dropped = sum(i.dropped for i in items)
    assert ok + dropped == 300
