"""In-process deployments: one trust anchor, a gateway, N peers, clients.

Used by the test-suite and the load harness. Peers hold synthetic
``power_consumption`` readings every ten minutes over the last eight hours.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Iterable

from .client import Client
from .crypto import Identity, generate_identity
from .gateway import AccessRule, Gateway
from .model import Label, Query, labels_from_mapping, parse_predicate, Preselector, Preprocessor
from .peer import LocalPolicy, PeerDaemon
from .transport import InProcessNetwork, WireRecorder

INPUT = "power_consumption"
GATEWAY_ADDRESS = "gateway"
READING_INTERVAL = 600
READING_SPAN = 8 * 3600


def heater_query() -> Query:
    """Sum over heaters in kitchens and meeting rooms of their 6-hour average power draw."""
    return Query(
        parse_predicate("type = heater ∧ roomtype ∈ [kitchen, meetingroom]"),
        Preselector.LAST_6_HOURS,
        Preprocessor.AVERAGE,
        "sum",
        INPUT,
    )


def default_labels(i: int) -> dict:
    return {
        "type": "heater",
        "roomtype": ("kitchen", "meetingroom")[i % 2],
        "level": str(3 + i % 2),
        "buildingpart": "A",
    }


@dataclass
class Testbed:
    anchor: Identity
    gateway: Gateway
    peers: dict[str, PeerDaemon]
    network: InProcessNetwork
    recorder: WireRecorder | None
    readings: dict[str, list[tuple[int, Decimal]]] = field(default_factory=dict)
    now: int = 0

    def make_client(self, subject: str = "client", purpose: str = "energy monitoring", identity: Identity | None = None) -> Client:
        identity = identity or generate_identity(subject, purpose, issuer=self.anchor)
        return Client(
            identity,
            GATEWAY_ADDRESS,
            self.network.transport(subject),
            anchors=[self.anchor.certificate],
            authorities=[self.gateway.authority.certificate],
        )

    def add_peer(self, peer: PeerDaemon) -> None:
        self.peers[peer.peer_id] = peer
        self.network.attach(peer.address, peer)
        peer.register(GATEWAY_ADDRESS)

    def close(self) -> None:
        self.gateway.stop()


def build_testbed(
    n_peers: int = 10,
    backend: str = "mock",
    labels: Callable[[int], dict] = default_labels,
    queries: Iterable[Query] | None = None,
    rules: Iterable[AccessRule] | None = None,
    policy: Callable[[], LocalPolicy] = LocalPolicy,
    seed: int = 0,
    record: bool = False,
    workers: int = 8,
    queue_capacity: int = 100,
    peer_timeout: float = 10.0,
    min_group: int = 3,
    now: int | None = None,
    start: bool = True,
    **gateway_kwargs,
) -> Testbed:
    now = int(time.time()) if now is None else now
    rng = random.Random(seed)
    recorder = WireRecorder() if record else None
    network = InProcessNetwork(recorder)
    anchor = generate_identity("anchor", issuer=None, not_before=now - 3600)
    gw_identity = generate_identity("gateway", "smc gateway", issuer=anchor, not_before=now - 3600)
    gateway = Gateway(
        gw_identity,
        anchors=[anchor.certificate],
        transport=network.transport(GATEWAY_ADDRESS),
        queries=[heater_query()] if queries is None else queries,
        rules=[AccessRule()] if rules is None else rules,
        min_publishable_group=min_group,
        peer_timeout=peer_timeout,
        workers=workers,
        queue_capacity=queue_capacity,
        **gateway_kwargs,
    )
    network.attach(GATEWAY_ADDRESS, gateway)
    bed = Testbed(anchor, gateway, {}, network, recorder, now=now)
    for i in range(n_peers):
        peer_id = f"peer-{i:02d}"
        ident = generate_identity(peer_id, issuer=anchor, not_before=now - 3600)
        peer = PeerDaemon(
            peer_id,
            ident,
            labels_from_mapping(labels(i)),
            [INPUT],
            anchors=[anchor.certificate],
            authorities=[gateway.authority.certificate],
            policy=policy(),
            backend=backend,
            transport=network.transport(peer_id),
            address=peer_id,
        )
        series = []
        for t in range(now - READING_SPAN + READING_INTERVAL, now + 1, READING_INTERVAL):
            value = Decimal(rng.randrange(0, 500_000)) / 100
            peer.ingest(INPUT, value, t)
            series.append((t, value))
        bed.readings[peer_id] = series
        bed.add_peer(peer)
    if start:
        gateway.start()
    return bed
