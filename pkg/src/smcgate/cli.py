"""Command line: gateway and peer daemons, the reference client, the load harness."""

from __future__ import annotations

import json
import logging
import signal
import sys
import threading
import time
from decimal import Decimal, InvalidOperation
from pathlib import Path
from urllib.parse import urlparse

import click

from . import bench as bench_mod
from .client import Client, ClientError, GrantStore, TamperedResult, select
from .crypto import Identity, generate_identity, load_certificate, save_certificate
from .gateway import AccessRule, Gateway, QueryTemplate
from .model import Query, labels_from_mapping
from .peer import AccountabilityLog, LocalPolicy, PeerDaemon, ReadingStore
from .testbed import INPUT, default_labels, heater_query
from .transport import HttpTransport, Unreachable, serve

log = logging.getLogger("smcgate")

EXIT_FAILURE = 1
EXIT_REFUSED = 3
EXIT_TAMPERED = 4
EXIT_UNREACHABLE = 5


class Config(dict):
    """JSON config whose relative paths resolve against the file's directory."""

    def __init__(self, path: str):
        self.file = Path(path).resolve()
        super().__init__(json.loads(self.file.read_text()))

    def path(self, key: str) -> Path:
        return self.file.parent / self[key]

    def paths(self, key: str) -> list[Path]:
        return [self.file.parent / p for p in self.get(key, [])]

    def identity(self) -> Identity:
        ident = self["identity"]
        return Identity.load(self.file.parent / ident["cert"], self.file.parent / ident["key"])

    def certificates(self, key: str):
        return [load_certificate(p) for p in self.paths(key)]


def _wait_forever(on_stop) -> None:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(1):
            pass
    except KeyboardInterrupt:
        pass
    on_stop()


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int) -> None:
    """SMC gateway: query aggregates over private peer data."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(asctime)s %(name)s %(levelname)s %(message)s")


# -- gateway -------------------------------------------------------------------


@main.group()
def gateway() -> None:
    """Run the gateway."""


def build_gateway(cfg: Config) -> Gateway:
    authority = cfg.get("authority")
    authority_id = Identity.load(cfg.file.parent / authority["cert"], cfg.file.parent / authority["key"]) if authority else None
    return Gateway(
        cfg.identity(),
        cfg.certificates("anchors"),
        transport=HttpTransport(timeout=cfg.get("peer_timeout", 10.0)),
        authority=authority_id,
        queries=[Query.from_dict(q) for q in cfg.get("queries", [])],
        rules=[AccessRule.from_dict(r) for r in cfg.get("rules", [])],
        templates=[QueryTemplate.from_dict(t) for t in cfg.get("templates", [])],
        enumerate_predicates=cfg.get("enumerate_predicates", False),
        min_publishable_group=cfg.get("min_publishable_group", 3),
        grant_lifetime=cfg.get("grant_lifetime", 3600),
        peer_timeout=cfg.get("peer_timeout", 10.0),
        queue_capacity=cfg.get("queue_capacity", 100),
        workers=cfg.get("workers", 8),
        liveness_window=cfg.get("liveness_window", 60.0),
    )


@gateway.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def gateway_serve(config_path: str) -> None:
    cfg = Config(config_path)
    gw = build_gateway(cfg)
    server = serve(gw, cfg.get("host", "127.0.0.1"), cfg.get("port", 8700))
    gw.start(probe_interval=cfg.get("probe_interval", 20.0))
    click.echo(f"gateway listening on http://{server.server_address[0]}:{server.server_port}")

    def stop():
        server.shutdown()
        gw.stop()

    _wait_forever(stop)


# -- peer ------------------------------------------------------------------------


@main.group()
def peer() -> None:
    """Run a peer or inspect its local state."""


def build_peer(cfg: Config) -> PeerDaemon:
    return PeerDaemon(
        cfg["peer_id"],
        cfg.identity(),
        labels_from_mapping(cfg["labels"]),
        cfg["inputs"],
        anchors=cfg.certificates("anchors"),
        authorities=cfg.certificates("authorities"),
        policy=LocalPolicy.from_dict(cfg.get("policy", {})),
        protocols=cfg.get("protocols", ["sum"]),
        store=ReadingStore(cfg.path("store")),
        log_path=cfg.path("log"),
        backend=cfg.get("backend", "additive"),
        transport=HttpTransport(timeout=cfg.get("timeout", 10.0)),
        address=cfg["address"],
    )


@peer.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def peer_serve(config_path: str) -> None:
    cfg = Config(config_path)
    daemon = build_peer(cfg)
    url = urlparse(daemon.address)
    server = serve(daemon, url.hostname or "127.0.0.1", url.port or 0)
    try:
        cert = daemon.register(cfg["gateway"], attempts=cfg.get("register_attempts", 8))
    except Unreachable as exc:
        server.shutdown()
        _fail(EXIT_UNREACHABLE, f"gateway unreachable: {exc}")
    except Exception as exc:
        server.shutdown()
        _fail(EXIT_FAILURE, f"registration failed: {exc}")
    save_certificate(cert, cfg.path("gateway_cert"))
    click.echo(f"peer {daemon.peer_id} listening on {daemon.address}, registered with {cfg['gateway']}")
    _wait_forever(server.shutdown)


@peer.command("ingest")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--timestamp", type=int, default=None, help="Unix seconds; defaults to now.")
@click.argument("input_id")
@click.argument("value")
def peer_ingest(config_path: str, timestamp: int | None, input_id: str, value: str) -> None:
    """Append one reading to the local store."""
    cfg = Config(config_path)
    if input_id not in cfg["inputs"]:
        _fail(EXIT_FAILURE, f"{input_id!r} is not one of this peer's inputs {cfg['inputs']}")
    try:
        number = Decimal(value)
    except InvalidOperation:
        _fail(EXIT_FAILURE, f"not a number: {value!r}")
    try:
        reading = ReadingStore(cfg.path("store")).append(input_id, number, int(time.time()) if timestamp is None else timestamp)
    except ValueError as exc:
        _fail(EXIT_FAILURE, str(exc))
    click.echo(f"{reading.input} {reading.timestamp} {reading.value}")


@peer.group("log")
def peer_log() -> None:
    """Accountability log."""


@peer_log.command("list")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def peer_log_list(config_path: str) -> None:
    cfg = Config(config_path)
    for i, entry in enumerate(AccountabilityLog(cfg.path("log")).entries()):
        q = entry.request.query
        click.echo(
            f"{i}\t{entry.session_id}\t{entry.request.timestamp}\t{entry.request.certificate.subject}"
            f"\t{len(entry.group)} peers\t{entry.value}\t{q.canonical()}"
        )


@peer_log.command("verify")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gateway-cert", type=click.Path(exists=True, dir_okay=False), default=None, help="Defaults to the certificate pinned at registration.")
def peer_log_verify(config_path: str, gateway_cert: str | None) -> None:
    cfg = Config(config_path)
    cert = load_certificate(gateway_cert or cfg.path("gateway_cert"))
    report = AccountabilityLog(cfg.path("log")).verify(cert, cfg.certificates("anchors"))
    bad = [(i, problem) for i, problem in report if problem]
    for i, problem in bad:
        click.echo(f"entry {i}: {problem}")
    click.echo(f"{len(report) - len(bad)}/{len(report)} entries verify")
    sys.exit(EXIT_FAILURE if bad else 0)


# -- client ----------------------------------------------------------------------


@main.group()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def client(ctx, config_path: str) -> None:
    """Reference client."""
    cfg = Config(config_path)
    ctx.obj = Client(
        cfg.identity(),
        cfg["gateway"],
        HttpTransport(timeout=cfg.get("timeout", 60.0)),
        anchors=cfg.certificates("anchors"),
        authorities=cfg.certificates("authorities"),
        grants=GrantStore(cfg.path("grants")),
    )


def _run_client(fn):
    try:
        return fn()
    except TamperedResult as exc:
        _fail(EXIT_TAMPERED, f"TAMPERED_RESULT: {exc.detail}")
    except ClientError as exc:
        _fail(EXIT_REFUSED, str(exc))
    except Unreachable as exc:
        _fail(EXIT_UNREACHABLE, f"gateway unreachable: {exc}")


@client.command("metadata")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def client_metadata(c: Client, as_json: bool) -> None:
    """List the published queries."""
    catalog = _run_client(c.metadata)
    if as_json:
        click.echo(json.dumps([{"index": i, **e.query.to_dict(), "description": e.description} for i, e in enumerate(catalog)], ensure_ascii=False))
        return
    for i, e in enumerate(catalog):
        click.echo(f"[{i}] {e.query.canonical()}\n    {e.description}")


@client.command("grant")
@click.argument("selectors", nargs=-1, required=True)
@click.pass_obj
def client_grant(c: Client, selectors: tuple[str, ...]) -> None:
    """Request one grant covering the selected queries (index or canonical prefix)."""

    def run():
        catalog = c.metadata()
        return c.request_grant([select(catalog, s) for s in selectors])

    grant = _run_client(run)
    click.echo(f"grant valid until {time.strftime('%Y-%m-%d %H:%M:%S', time.gmtime(grant.not_after))} UTC for {len(grant.queries)} queries")


@client.command("compute")
@click.argument("selector")
@click.option("--poll", type=float, default=None, help="Repeat at this many requests per second.")
@click.option("--duration", type=float, default=10.0, show_default=True, help="How long to keep polling.")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def client_compute(c: Client, selector: str, poll: float | None, duration: float, as_json: bool) -> None:
    """Run a computation and print the decrypted result."""
    query = _run_client(lambda: select(c.metadata(), selector))

    def emit(result):
        if as_json:
            click.echo(json.dumps({"session_id": result.session_id, "value": str(result.value), "query": query.canonical()}, ensure_ascii=False))
        else:
            click.echo(f"{result.value}\t(session {result.session_id})")

    if not poll:
        emit(_run_client(lambda: c.compute(query)))
        return
    interval = 1.0 / poll
    end = time.monotonic() + duration
    while time.monotonic() < end:
        t0 = time.monotonic()
        emit(_run_client(lambda: c.compute(query)))
        time.sleep(max(0.0, interval - (time.monotonic() - t0)))


# -- bench -----------------------------------------------------------------------


@main.group()
def bench() -> None:
    """Open-loop load runs against an in-process deployment."""


def _scenario_options(f):
    options = [
        click.option("--protocol", type=click.Choice(bench_mod.PROTOCOLS), required=True),
        click.option("--peers", "peer_count", type=int, default=10, show_default=True),
        click.option("--duration", type=float, default=None, help="Seconds; defaults to 30 (grant) or 60 (computation)."),
        click.option("--workers", type=int, default=8, show_default=True),
        click.option("--queue", "queue_capacity", type=int, default=100, show_default=True),
        click.option("--backend", type=click.Choice(["mock", "additive"]), default="mock", show_default=True),
        click.option("--short", is_flag=True, help="Allow runs shorter than the reference lengths."),
        click.option("--out", type=click.Path(file_okay=False), default="bench-out", show_default=True),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _base(protocol, peer_count, duration, workers, queue_capacity, backend, short, rate=1.0):
    duration = bench_mod.MIN_DURATION[protocol] if duration is None else duration
    try:
        return bench_mod.LoadScenario(protocol, peer_count, rate, duration, workers, queue_capacity, backend, strict=not short)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None


@bench.command("run")
@_scenario_options
@click.option("--rate", type=float, required=True, help="Offered requests per second.")
def bench_run(protocol, peer_count, duration, workers, queue_capacity, backend, short, out, rate):
    scenario = _base(protocol, peer_count, duration, workers, queue_capacity, backend, short, rate)
    report = bench_mod.run_scenario(scenario)
    bench_mod.write_reports([report], out)
    click.echo(json.dumps(report.summary()))


@bench.command("sweep")
@_scenario_options
@click.option("--rates", required=True, help="Comma-separated offered rates, e.g. 10,50,100.")
@click.option("--cooldown", type=float, default=5.0, show_default=True)
def bench_sweep(protocol, peer_count, duration, workers, queue_capacity, backend, short, out, rates, cooldown):
    try:
        values = [float(r) for r in rates.split(",") if r.strip()]
    except ValueError:
        raise click.UsageError(f"bad rate list {rates!r}") from None
    if not values:
        raise click.UsageError("no rates given")
    base = _base(protocol, peer_count, duration, workers, queue_capacity, backend, short)
    reports = bench_mod.sweep(values, base, cooldown=cooldown, out_dir=out)
    for r in reports:
        click.echo(json.dumps(r.summary()))
    click.echo(f"first drop at {bench_mod.first_drop_rate(reports)} req/s; reports in {out}")


# -- demo setup ------------------------------------------------------------------


@main.command("init-demo")
@click.argument("directory", type=click.Path(file_okay=False))
@click.option("--peers", "n_peers", type=int, default=5, show_default=True)
@click.option("--gateway-port", type=int, default=8700, show_default=True)
@click.option("--peer-port", type=int, default=8710, show_default=True, help="First peer port; the rest follow.")
def init_demo(directory: str, n_peers: int, gateway_port: int, peer_port: int) -> None:
    """Write identities and configs for a local gateway, N peers and one client."""
    root = Path(directory)
    keys = root / "keys"
    anchor = generate_identity("demo-anchor")
    anchor.save(keys, "anchor")
    gw = generate_identity("gateway", "smc gateway", issuer=anchor)
    gw.save(keys, "gateway")
    anchors = ["keys/anchor.cert.json"]
    gateway_url = f"http://127.0.0.1:{gateway_port}"
    _write(root / "gateway.json", {
        "host": "127.0.0.1",
        "port": gateway_port,
        "identity": {"cert": "keys/gateway.cert.json", "key": "keys/gateway.key.json"},
        "anchors": anchors,
        "queries": [heater_query().to_dict()],
        "rules": [asdict_rule(AccessRule())],
        "templates": [{"input": INPUT, "preselector": "last hour", "preprocessor": "avg"}],
        "enumerate_predicates": False,
        "queue_capacity": 100,
        "workers": 8,
        "peer_timeout": 10,
        "grant_lifetime": 3600,
    })
    for i in range(n_peers):
        peer_id = f"peer-{i:02d}"
        generate_identity(peer_id, issuer=anchor).save(keys, peer_id)
        _write(root / "peers" / f"{peer_id}.json", {
            "peer_id": peer_id,
            "address": f"http://127.0.0.1:{peer_port + i}",
            "gateway": gateway_url,
            "identity": {"cert": f"../keys/{peer_id}.cert.json", "key": f"../keys/{peer_id}.key.json"},
            "anchors": ["../" + a for a in anchors],
            "authorities": ["../keys/gateway.cert.json"],
            "labels": default_labels(i),
            "inputs": [INPUT],
            "protocols": ["sum"],
            "policy": {"min_group_size": 3, "max_request_age": 120, "max_requests_per_client_per_hour": 600},
            "backend": "additive",
            "store": f"{peer_id}.readings.sqlite",
            "log": f"{peer_id}.log.jsonl",
            "gateway_cert": f"{peer_id}.gateway.cert.json",
        })
    generate_identity("client", "energy monitoring", issuer=anchor).save(keys, "client")
    _write(root / "client.json", {
        "gateway": gateway_url,
        "identity": {"cert": "keys/client.cert.json", "key": "keys/client.key.json"},
        "anchors": anchors,
        "authorities": ["keys/gateway.cert.json"],
        "grants": "client.grants.json",
    })
    click.echo(f"wrote demo deployment with {n_peers} peers to {root}")


def asdict_rule(rule: AccessRule) -> dict:
    d = {"client": rule.client, "queries": sorted(rule.queries)}
    if rule.hours is not None:
        d["hours"] = list(rule.hours)
    return d


def _write(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
