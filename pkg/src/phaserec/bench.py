"""Per-scan inference latency for sampled versus full-scan prediction."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .model import LinearModelParams
from .pipeline import SamplerConfig, predict_scan
from .preprocess import DEFAULT_FEATURES, DEFAULT_WINDOW, FeatureConfig, WindowSpec


@dataclass(frozen=True)
class BenchRow:
    r_percent: float
    n_scans: int
    mean_seconds: float
    calls_per_scan: float
    total_calls: int
    speedup_vs_full: float = float("nan")


def bench_latency(scans: Callable[[], Iterable], params: LinearModelParams, r_values: Sequence[float],
                  seed: int = 0, window: WindowSpec = DEFAULT_WINDOW,
                  features: FeatureConfig = DEFAULT_FEATURES, repeats: int = 1) -> list:
    """Time ``predict_scan`` per scan for each R.

    ``scans`` is a zero-argument callable returning a fresh iterable, so
    large synthetic sets can be regenerated lazily; only the prediction
    call is timed.  Classifier calls are counted from the number of slices
    each prediction scored.
    """
    if not r_values:
        raise ValueError("need at least one R value")
    _warm_up(params, window, features)
    rows = []
    for r in r_values:
        cfg = SamplerConfig(r, seed)
        times = []
        calls = []
        for _ in range(repeats):
            for scan in scans():
                scan = getattr(scan, "scan", scan)
                t0 = time.perf_counter()
                pred = predict_scan(scan, params, cfg, window, features)
                times.append(time.perf_counter() - t0)
                calls.append(pred.probs.shape[0])
        n = len(times) // repeats
        rows.append(BenchRow(float(r), n, float(np.mean(times)), float(np.mean(calls)), int(sum(calls)) // repeats))
    full = {row.r_percent: row.mean_seconds for row in rows}.get(100.0)
    if full is not None:
        rows = [BenchRow(r.r_percent, r.n_scans, r.mean_seconds, r.calls_per_scan, r.total_calls,
                         full / r.mean_seconds) for r in rows]
    return rows


def _warm_up(params, window, features) -> None:
    # trigger JIT compilation outside the timed region
    from .core import CtScan

    dummy = CtScan("warmup", "warmup", np.zeros((2, 16, 16)))
    predict_scan(dummy, params, SamplerConfig(50.0, 0), window, features)


def backend() -> str:
    return _kernels.BACKEND
