import json

import pytest

from smcgate.bench import LoadScenario, first_drop_rate, first_saturation_rate, run_scenario, sweep


def conserved(report):
    return report.offered == report.successes + report.drops + report.failures


def test_strict_durations():
    with pytest.raises(ValueError):
        LoadScenario("grant", duration=5)
    with pytest.raises(ValueError):
        LoadScenario("computation", duration=30)
    LoadScenario("computation", duration=60)


@pytest.mark.parametrize("kwargs", [{"protocol": "other"}, {"protocol": "grant", "request_rate": 0}, {"protocol": "grant", "peer_count": 0}])
def test_invalid_scenarios(kwargs):
    with pytest.raises(ValueError):
        LoadScenario(**{"strict": False, **kwargs})


def test_grant_run_light_load():
    report = run_scenario(LoadScenario("grant", peer_count=3, request_rate=50, duration=1, strict=False))
    assert conserved(report)
    assert report.drops == 0 and report.failures == 0
    assert report.successes == report.offered == 50
    assert report.q25 <= report.median <= report.q75


def test_computation_run():
    report = run_scenario(LoadScenario("computation", peer_count=4, request_rate=5, duration=1, strict=False))
    assert conserved(report)
    assert report.successes == report.offered


def test_overload_drops_only_when_full():
    report = run_scenario(LoadScenario("grant", peer_count=3, request_rate=5000, duration=1, queue_capacity=20, workers=1, strict=False))
    assert conserved(report)
    assert report.drops > 0
    assert report.max_queue_depth == 20
    # every request offered while the queue had room was accepted
    assert all(d <= 20 for _, d in report.queue_samples)


def test_sweep_writes_reports(tmp_path):
    base = LoadScenario("grant", peer_count=3, duration=0.5, strict=False)
    reports = sweep([20, 40], base, cooldown=0, out_dir=tmp_path)
    assert [r.rate for r in reports] == [20, 40]
    saved = json.loads((tmp_path / "report.json").read_text())
    assert len(saved) == 2
    assert (tmp_path / "report.csv").read_text().startswith("protocol,")
    assert {p.name for p in tmp_path.glob("*.svg")} == {"grant_latency.svg", "grant_throughput.svg", "grant_queue.svg"}
    assert first_drop_rate(reports) is None and first_saturation_rate(reports) is None


def test_sweep_empty():
    assert sweep([], LoadScenario("grant", strict=False)) == []
