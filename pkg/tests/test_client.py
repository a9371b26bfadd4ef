import time

import pytest

from smcgate.client import CatalogEntry, ClientError, GrantStore, TamperedResult, select
from smcgate.testbed import heater_query

from helpers import other_query


class Tamper:
    """Transport wrapper that rewrites responses on their way to the client."""

    def __init__(self, inner, edit):
        self.inner = inner
        self.edit = edit
        self.calls = 0

    def post(self, address, path, body, timeout=None):
        self.calls += 1
        return self.edit(path, self.inner.post(address, path, body, timeout))

    def get(self, address, path, timeout=None):
        self.calls += 1
        return self.inner.get(address, path, timeout)

    def stream(self, address, path, body, timeout=None):
        self.calls += 1
        for m in self.inner.stream(address, path, body, timeout):
            yield self.edit(path, m)


def test_metadata_and_select(testbed):
    bed = testbed(5, queries=[heater_query(), other_query()])
    client = bed.make_client()
    catalog = client.metadata()
    assert [e.query for e in catalog] == sorted([heater_query(), other_query()], key=lambda q: q.canonical())
    assert select(catalog, "0") == catalog[0].query
    assert select(catalog, "roomtype") == heater_query()
    with pytest.raises(ClientError):
        select(catalog, "7")
    with pytest.raises(ClientError):
        select(catalog, "nothing")


def test_grant_store_persists(tmp_path, testbed):
    bed = testbed(5)
    client = bed.make_client()
    client.grants = GrantStore(tmp_path / "grants.json")
    grant = client.request_grant([heater_query()])
    reloaded = GrantStore(tmp_path / "grants.json")
    assert reloaded.get(heater_query()) == grant
    reloaded.discard(grant)
    assert len(GrantStore(tmp_path / "grants.json")) == 0


def test_no_grant_fails_before_network(testbed):
    bed = testbed(5)
    client = bed.make_client()
    client.transport = Tamper(client.transport, lambda p, m: m)
    with pytest.raises(ClientError) as exc:
        client.compute(heater_query())
    assert exc.value.code == "NO_GRANT"
    assert client.transport.calls == 0


def test_forged_grant_discarded(testbed):
    bed = testbed(5)
    client = bed.make_client()

    def edit(path, m):
        if path == "/grants" and m.get("status") == "ok":
            m["grant"]["not_after"] += 100000
        return m

    client.transport = Tamper(client.transport, edit)
    with pytest.raises(ClientError) as exc:
        client.request_grant([heater_query()])
    assert exc.value.code == "GRANT_INVALID"
    assert len(client.grants) == 0


def test_gateway_failure_passes_through(testbed):
    bed = testbed(5, rules=[])
    with pytest.raises(ClientError) as exc:
        bed.make_client().request_grant([heater_query()])
    assert exc.value.code == "POLICY_DENIED"


def test_renewal_near_expiry(testbed):
    bed = testbed(5)
    client = bed.make_client()
    first = client.request_grant([heater_query()])
    offset = first.not_after - first.not_before - 300
    bed.gateway.clock = client.clock = lambda: time.time() + offset
    renewed = client.grant_for(heater_query())
    assert renewed != first and renewed.not_after > first.not_after
    assert client.grant_for(heater_query()) == renewed


def test_tampered_result_detected(testbed):
    bed = testbed(5)
    client = bed.make_client()
    client.request_grant([heater_query()])

    def edit(path, m):
        if m.get("ciphertext"):
            ct = bytearray.fromhex(m["ciphertext"])
            ct[len(ct) // 2] ^= 1
            m["ciphertext"] = ct.hex()
        return m

    client.transport = Tamper(client.transport, edit)
    with pytest.raises(TamperedResult):
        client.compute(heater_query())


def test_result_for_other_session_rejected(testbed):
    bed = testbed(5)
    client = bed.make_client()
    client.request_grant([heater_query()])
    old = {}

    def capture(path, m):
        if m.get("ciphertext"):
            old.setdefault("ct", m["ciphertext"])
            m["ciphertext"] = old["ct"]
        return m

    client.transport = Tamper(client.transport, capture)
    client.compute(heater_query())
    with pytest.raises(TamperedResult):
        client.compute(heater_query())


def test_veto_surfaces_as_failure(testbed):
    from smcgate.peer import LocalPolicy

    bed = testbed(5, policy=lambda: LocalPolicy(min_group_size=50))
    client = bed.make_client()
    client.request_grant([heater_query()])
    with pytest.raises(ClientError) as exc:
        client.compute(heater_query())
    assert exc.value.code == "PEER_VETO" and exc.value.detail == "GROUP_TOO_SMALL"


def test_catalog_entry_description(testbed):
    bed = testbed(5)
    [entry] = bed.make_client().metadata()
    assert isinstance(entry, CatalogEntry) and entry.description
