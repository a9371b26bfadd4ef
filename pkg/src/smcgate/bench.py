"""Open-loop load harness for the grant and computation protocols.

Requests are offered on a fixed schedule regardless of how fast the gateway
answers, so an overloaded gateway shows up as a full queue and dropped
requests rather than as a slower client. Latency is the time a gateway
worker spends on a request; queue waiting is reported separately.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .model import ComputationRequest, GrantRequest
from .peer import LocalPolicy
from .testbed import build_testbed, heater_query

log = logging.getLogger(__name__)

PROTOCOLS = ("grant", "computation")
MIN_DURATION = {"grant": 30.0, "computation": 60.0}


@dataclass
class LoadScenario:
    protocol: str
    peer_count: int = 10
    request_rate: float = 1.0
    duration: float = 30.0
    workers: int = 8
    queue_capacity: int = 100
    backend: str = "mock"
    # strict=False allows runs shorter than the reference lengths (tests, smoke runs)
    strict: bool = True

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.request_rate <= 0:
            raise ValueError("request rate must be positive")
        if self.peer_count < 1:
            raise ValueError("need at least one peer")
        if self.strict and self.duration < MIN_DURATION[self.protocol]:
            raise ValueError(f"{self.protocol} runs last at least {MIN_DURATION[self.protocol]:.0f}s")


@dataclass
class RunReport:
    scenario: dict
    offered: int
    successes: int
    drops: int
    failures: int
    latencies: list[float]
    waits: list[float]
    median: float | None
    q25: float | None
    q75: float | None
    throughput: float
    offered_rate: float
    max_queue_depth: int
    queue_depth_after_last_send: int
    queue_samples: list[tuple[float, int]] = field(default_factory=list)
    # queue depth seen by each dropped request, and the deepest queue an accepted one joined
    drop_depths: list[int] = field(default_factory=list)
    max_accepted_depth: int = 0
    failure_reasons: dict[str, int] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.scenario["request_rate"]

    @property
    def saturated(self) -> bool:
        return self.max_queue_depth >= self.scenario["queue_capacity"]

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict:
        return {
            "protocol": self.scenario["protocol"],
            "peers": self.scenario["peer_count"],
            "rate": self.rate,
            "offered": self.offered,
            "successes": self.successes,
            "drops": self.drops,
            "failures": self.failures,
            "median_ms": None if self.median is None else round(self.median * 1000, 3),
            "q25_ms": None if self.q25 is None else round(self.q25 * 1000, 3),
            "q75_ms": None if self.q75 is None else round(self.q75 * 1000, 3),
            "offered_rate": round(self.offered_rate, 3),
            "throughput": round(self.throughput, 3),
            "max_queue_depth": self.max_queue_depth,
            "queue_depth_after_last_send": self.queue_depth_after_last_send,
        }


def _quartiles(values: Sequence[float]) -> tuple[float | None, float | None, float | None]:
    if not values:
        return None, None, None
    if len(values) == 1:
        return values[0], values[0], values[0]
    q1, q2, q3 = statistics.quantiles(values, n=4, method="inclusive")
    return q1, q2, q3


def run_scenario(s: LoadScenario) -> RunReport:
    """Launch an in-process deployment and offer load at a fixed rate."""
    try:
        bed = build_testbed(
            s.peer_count,
            backend=s.backend,
            workers=s.workers,
            queue_capacity=s.queue_capacity,
            policy=lambda: LocalPolicy(max_requests_per_client_per_hour=10**9, max_request_age=int(s.duration) + 120),
        )
    except Exception as exc:
        raise RuntimeError(f"could not launch deployment: {exc}") from exc
    try:
        client = bed.make_client("bench-client", "load evaluation")
        query = heater_query()
        if s.protocol == "grant":
            kind = "grant"
            payload = GrantRequest(client.identity.certificate, (query,)).signed(client.identity).to_dict()
        else:
            kind = "computation"
            grant = client.request_grant([query])
            payload = (
                ComputationRequest(query, client.identity.certificate, grant, int(time.time()))
                .signed(client.identity)
                .to_dict()
            )
        items = []
        samples: list[tuple[float, int]] = []
        interval = 1.0 / s.request_rate
        start = time.perf_counter()
        end = start + s.duration
        i = 0
        while True:
            scheduled = start + i * interval
            if scheduled >= end:
                break
            delay = scheduled - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            item = bed.gateway.submit(kind, payload)
            items.append(item)
            samples.append((scheduled - start, item.depth_on_arrival))
            i += 1
        depth_after = bed.gateway.stats()["queue_depth"]
        send_elapsed = time.perf_counter() - start
        deadline = time.monotonic() + 4 * bed.gateway.peer_timeout + s.queue_capacity
        for item in items:
            item.wait(max(0.0, deadline - time.monotonic()))
    finally:
        bed.close()

    successes = drops = failures = 0
    latencies, waits = [], []
    reasons: dict[str, int] = {}
    for item in items:
        response = item.response
        if item.dropped:
            drops += 1
        elif response is not None and response.get("status") == "ok":
            successes += 1
            latencies.append(item.service_time)
            waits.append(item.t_start - item.t_offer)
        else:
            failures += 1
            reason = "UNFINISHED" if response is None else response.get("reason", "UNKNOWN")
            reasons[reason] = reasons.get(reason, 0) + 1
    q25, median, q75 = _quartiles(latencies)
    finished = [item.t_end for item in items if item.t_end is not None and not item.dropped]
    # the generator may fall behind schedule under overload, so measure the real window
    window = max([s.duration, send_elapsed] + [t - start for t in finished])
    return RunReport(
        scenario=asdict(s),
        offered=len(items),
        successes=successes,
        drops=drops,
        failures=failures,
        latencies=latencies,
        waits=waits,
        median=median,
        q25=q25,
        q75=q75,
        throughput=successes / window,
        offered_rate=len(items) / max(send_elapsed, 1e-9),
        max_queue_depth=max((d for _, d in samples), default=0),
        queue_depth_after_last_send=depth_after,
        queue_samples=samples,
        failure_reasons=reasons,
        drop_depths=[item.depth_on_arrival for item in items if item.dropped],
        max_accepted_depth=max((item.depth_on_arrival for item in items if not item.dropped), default=0),
    )


def sweep(
    rates: Sequence[float],
    base: LoadScenario,
    cooldown: float = 5.0,
    out_dir: str | Path | None = None,
    plots: bool = True,
) -> list[RunReport]:
    """One run per rate, in the given order. Reports written so far survive a failing run."""
    reports: list[RunReport] = []
    try:
        for n, rate in enumerate(rates):
            if n and cooldown:
                time.sleep(cooldown)
            scenario = LoadScenario(**{**asdict(base), "request_rate": rate})
            report = run_scenario(scenario)
            log.info("rate %.1f/s: %s", rate, report.summary())
            reports.append(report)
            if out_dir is not None:
                write_reports(reports, out_dir, plots=False)
    finally:
        if out_dir is not None and reports:
            write_reports(reports, out_dir, plots=plots)
    return reports


def peer_scaling(peer_counts: Sequence[int], base: LoadScenario, cooldown: float = 5.0) -> list[RunReport]:
    reports = []
    for n, count in enumerate(peer_counts):
        if n and cooldown:
            time.sleep(cooldown)
        reports.append(run_scenario(LoadScenario(**{**asdict(base), "peer_count": count})))
    return reports


def first_drop_rate(reports: Sequence[RunReport]) -> float | None:
    return next((r.rate for r in reports if r.drops), None)


def first_saturation_rate(reports: Sequence[RunReport]) -> float | None:
    return next((r.rate for r in reports if r.saturated), None)


def write_reports(reports: Sequence[RunReport], out_dir: str | Path, plots: bool = True, name: str = "report") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    rows = [r.summary() for r in reports]
    if rows:
        with open(out / f"{name}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    if plots and reports:
        plot_reports(reports, out)


def plot_reports(reports: Sequence[RunReport], out_dir: str | Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    written = []
    by_peers = len({r.scenario["peer_count"] for r in reports}) > 1
    xs = [r.scenario["peer_count"] if by_peers else r.rate for r in reports]
    xlabel = "peers" if by_peers else "offered load [requests/s]"
    protocol = reports[0].scenario["protocol"]

    def errorbars():
        med = [(r.median or 0) * 1000 for r in reports]
        lo = [m - (r.q25 or 0) * 1000 for m, r in zip(med, reports)]
        hi = [(r.q75 or 0) * 1000 - m for m, r in zip(med, reports)]
        return med, [lo, hi]

    figures = [("latency", "latency [ms] (median, 0.25/0.75 quantiles)")]
    if not by_peers:
        figures += [("throughput", "successful requests/s"), ("queue", "queue depth")]
    for key, ylabel in figures:
        fig, ax = plt.subplots(figsize=(6, 4))
        if key == "latency":
            med, err = errorbars()
            ax.errorbar(xs, med, yerr=err, marker="o", capsize=3)
        elif key == "throughput":
            ax.plot(xs, [r.throughput for r in reports], marker="o")
        else:
            ax.plot(xs, [r.queue_depth_after_last_send for r in reports], marker="o", label="after last send")
            ax.plot(xs, [r.max_queue_depth for r in reports], marker="x", linestyle="--", label="max on arrival")
            ax.axhline(reports[0].scenario["queue_capacity"], color="grey", linewidth=0.8)
            ax.legend()
        if not by_peers:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(f"{protocol} protocol")
        fig.tight_layout()
        path = out / f"{protocol}_{key}{'_peers' if by_peers else ''}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
