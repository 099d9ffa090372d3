"""Single-threaded inference latency benchmark."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from ..ghostnet import Model, count_flops, count_params

WARMUP = 10
DEFAULT_RUNS = 100
CSV_FIELDS = ("model", "folded", "median_ms", "p10_ms", "p90_ms", "runs", "flops", "params")


@dataclass
class BenchResult:
    name: str
    folded: bool
    times_ms: np.ndarray
    flops: int
    params: int

    @property
    def median(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def p10(self) -> float:
        return float(np.percentile(self.times_ms, 10))

    @property
    def p90(self) -> float:
        return float(np.percentile(self.times_ms, 90))

    def row(self) -> dict:
        return {"model": self.name, "folded": int(self.folded), "median_ms": f"{self.median:.4f}",
                "p10_ms": f"{self.p10:.4f}", "p90_ms": f"{self.p90:.4f}", "runs": len(self.times_ms),
                "flops": self.flops, "params": self.params}


def time_model(model: Model, shape: Sequence[int], runs: int = DEFAULT_RUNS, warmup: int = WARMUP,
               seed: int = 0, name: str = "model") -> BenchResult:
    """Time ``runs`` forward passes after ``warmup`` untimed ones, on one BLAS thread."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    x = np.random.default_rng(seed).standard_normal(tuple(shape)).astype(np.float32)
    times = np.empty(runs)
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            model.forward(x)
        for i in range(runs):
            t0 = time.perf_counter()
            model.forward(x)
            times[i] = (time.perf_counter() - t0) * 1e3
    return BenchResult(name, model.folded, times, count_flops(model, shape), count_params(model))


def header(shape, runs: int, warmup: int = WARMUP) -> str:
    return (f"# bench protocol: warmup={warmup} runs={runs} threads=1 statistic=median "
            f"input={'x'.join(map(str, shape))}")


def to_csv(results: List[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def to_table(results: List[BenchResult]) -> str:
    lines = [f"{'model':<20} {'folded':>6} {'median ms':>10} {'p10 ms':>9} {'p90 ms':>9} "
             f"{'MFLOPs':>9} {'params':>9}"]
    for r in results:
        lines.append(f"{r.name:<20} {str(r.folded):>6} {r.median:>10.3f} {r.p10:>9.3f} {r.p90:>9.3f} "
                     f"{r.flops / 1e6:>9.3f} {r.params:>9d}")
    return "\n".join(lines)
