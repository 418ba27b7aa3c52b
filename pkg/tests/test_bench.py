import numpy as np
import pytest

from falcon_dehaze import bench
from falcon_dehaze.network import FalconConfig, init_weights


@pytest.fixture(scope="module")
def toy():
    cfg = FalconConfig.toy()
    return cfg, init_weights(cfg, 0)


def test_report_arithmetic():
    r = bench.BenchReport.from_latencies(64, 5, [10.0] * 30, 1.5, 100)
    assert r.fps == pytest.approx(100.0)
    assert r.mean_ms == r.median_ms == r.p95_ms == 10.0
    assert r.runs == 30


def test_p95_and_median():
    lat = np.arange(1.0, 101.0)
    r = bench.BenchReport.from_latencies(64, 5, lat, 0.0, 0)
    assert r.median_ms == 50.5
    assert r.p95_ms == pytest.approx(np.percentile(lat, 95))


def test_text_round_trip():
    r = bench.BenchReport.from_latencies(256, 5, [1 / 3, 2 / 7, 0.1], 1.0332, 46291, 1, "cpu x; 1 logical cpus")
    assert bench.BenchReport.from_text(r.to_text()) == r


def test_csv_round_trip():
    reports = [bench.BenchReport.from_latencies(s, 5, [s / 7.0, s / 9.0], s * 0.013, 46291) for s in (64, 128)]
    rows = bench.reports_from_csv(bench.reports_to_csv(reports))
    assert [row["resolution"] for row in rows] == [64, 128]
    for row, r in zip(rows, reports):
        assert row["mean_ms"] == r.mean_ms and row["fps"] == r.fps and row["p95_ms"] == r.p95_ms


def test_flop_and_param_counts(toy):
    cfg, _ = toy
    assert bench.count_params(cfg) == 46291
    count = bench.count_flops(cfg, 256)
    assert count.total == sum(f for _, f in count.items)
    assert count.gflops == pytest.approx(1.033, abs=1e-3)


def test_measure_fps_shape_of_report(toy):
    cfg, weights = toy
    r = bench.measure_fps(weights, 32, warmup=5, runs=30, config=cfg)
    assert r.runs == 30 and r.warmup == 5
    assert r.fps == pytest.approx(1000.0 / r.mean_ms)
    assert r.median_ms <= r.p95_ms


def test_invalid_arguments(toy):
    cfg, weights = toy
    with pytest.raises(ValueError, match="multiple"):
        bench.measure_fps(weights, 30, config=cfg)
    with pytest.raises(ValueError, match="warmup"):
        bench.measure_fps(weights, 32, warmup=1, config=cfg)


def test_repeated_measurements_are_stable(toy):
    cfg, weights = toy
    a = bench.measure_fps(weights, 64, config=cfg).median_ms
    b = bench.measure_fps(weights, 64, config=cfg).median_ms
    assert abs(a - b) / min(a, b) < 0.2
