"""Inference throughput measurement and FLOP/parameter accounting."""

from __future__ import annotations

import csv
import io
import os
import platform
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields

import numpy as np

from .density import DEFAULT_PATCH, with_cdm
from .network import FalconConfig, ModelWeights, falcon_forward, infer_config, layer_flops, layer_params, layer_specs
from .tensor import Tensor, no_grad

CSV_COLUMNS = ("resolution", "mean_ms", "median_ms", "p95_ms", "fps", "flops_g", "params")
MIN_RUNS = 30
MIN_WARMUP = 5


@dataclass
class FlopCount:
    items: list  # (layer name, flops)
    total: int

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def count_flops(config: FalconConfig, resolution) -> FlopCount:
    """Analytic FLOPs of one forward pass at ``resolution`` (int or (H, W)), itemised by layer."""
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    items = [(s.name, layer_flops(s, h, w)) for s in layer_specs(config)]
    return FlopCount(items, sum(f for _, f in items))


def count_params(config: FalconConfig) -> int:
    return sum(layer_params(s) for s in layer_specs(config))


def hardware_description() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{cpu}; {os.cpu_count()} logical cpus; {platform.system()} {platform.release()}"


@dataclass
class BenchReport:
    resolution: int
    warmup: int
    runs: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    flops_g: float
    params: int
    threads: int = 1
    hardware: str = ""

    @classmethod
    def from_latencies(cls, resolution, warmup, latencies_ms, flops_g, params, threads=1, hardware=""):
        lat = np.asarray(latencies_ms, dtype=np.float64)
        mean = float(lat.mean())
        return cls(resolution, warmup, len(lat), mean, float(np.median(lat)), float(np.percentile(lat, 95)),
                   1000.0 / mean, flops_g, params, threads, hardware)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "BenchReport":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, raw = (s.strip() for s in line.split("=", 1))
            kind = types[key]
            values[key] = raw if kind == "str" else (int(raw) if kind == "int" else float(raw))
        return cls(**values)

    def csv_row(self) -> list:
        return [self.resolution, repr(self.mean_ms), repr(self.median_ms), repr(self.p95_ms), repr(self.fps),
                repr(self.flops_g), self.params]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list[dict]:
    """Parse CSV rows back into typed dicts keyed by ``CSV_COLUMNS``."""
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        out.append({k: (int(row[k]) if k in ("resolution", "params") else float(row[k])) for k in CSV_COLUMNS})
    return out


def _thread_limit(threads: int):
    if threads <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def measure_fps(weights: ModelWeights, resolution: int, warmup: int = MIN_WARMUP, runs: int = MIN_RUNS,
                seed: int = 0, threads: int = 1, config: FalconConfig | None = None, use_cdm: bool = True,
                patch_size: int = DEFAULT_PATCH) -> BenchReport:
    """Time end-to-end batch-1 inference (density mask, concat, network) on a synthetic frame.

    ``threads`` caps BLAS/FFT parallelism inside the timed region; 0 leaves
    the library default in place.
    """
    config = config or infer_config(weights)
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if resolution < 1 or resolution % 2**config.depth:
        raise ValueError(f"resolution {resolution} must be a positive multiple of {2**config.depth}")
    frame = Tensor(np.random.default_rng(seed).random((1, 3, resolution, resolution), dtype=np.float32))
    latencies = []
    with _thread_limit(threads), no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter_ns()
            falcon_forward(with_cdm(frame, patch_size, use_cdm), weights, "eval", config)
            t1 = time.perf_counter_ns()
            if i >= warmup:
                latencies.append((t1 - t0) / 1e6)
    return BenchReport.from_latencies(
        resolution, warmup, latencies, count_flops(config, resolution).gflops, count_params(config),
        threads, hardware_description(),
    )
