"""Wait-time statistics shared by the schedulers and every cost function."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .scenario import Scenario

LONG_WAIT_THRESHOLD = 120
TAIL_BETA = 0.95

COST_LIKE = ("avg_wait", "max_wait", "std_wait", "tail_95", "pct_long_wait", "penalty_total")
BENEFIT_LIKE = ("pct_no_wait", "throughput")


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Timed take-offs, aligned with ``scenario.requests`` order.

    ``pads`` are global pad indices (class pads are contiguous, ascending
    class id). ``starts`` is the start of the final (take-off) grant.
    """

    request_ids: np.ndarray
    starts: np.ndarray
    pads: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Schedule):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in ((self.request_ids, other.request_ids), (self.starts, other.starts), (self.pads, other.pads))
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.request_ids, self.starts, self.pads):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class MetricVector:
    avg_wait: float
    max_wait: float
    std_wait: float
    tail_95: float
    pct_no_wait: float
    pct_long_wait: float
    penalty_total: float
    throughput: float = 0.0
    n: int = 0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _as_waits(waits: Sequence[float] | np.ndarray) -> np.ndarray:
    w = np.asarray(waits)
    if w.size == 0:
        raise UndefinedMetricError("statistics of an empty wait vector are undefined")
    return w


def tail_95(waits: Sequence[float] | np.ndarray, beta: float = TAIL_BETA) -> float:
    """CVaR: mean of the worst ``ceil((1 - beta) * n)`` waits."""
    w = _as_waits(waits).astype(np.float64)
    k = max(1, math.ceil(round((1.0 - beta) * w.size, 9)))
    tail = np.partition(w, w.size - k)[w.size - k:]
    return float(tail.mean())


def quantile_95(waits: Sequence[float] | np.ndarray) -> float:
    """Plain empirical 95th percentile (diagnostics only)."""
    return float(np.quantile(_as_waits(waits), 0.95))


def penalty_weights_at(starts: np.ndarray, class_index: np.ndarray, weights: np.ndarray, bin_width: int) -> np.ndarray:
    # starts past the horizon take the last bin's weight
    bins = np.minimum(np.asarray(starts) // bin_width, weights.shape[1] - 1)
    return weights[class_index, bins]


def compute_metrics(
    waits: Sequence[float] | np.ndarray,
    schedule: Schedule,
    scenario: Scenario,
    weights: np.ndarray | None = None,
) -> MetricVector:
    """Exact wait statistics for one schedule.

    ``weights`` overrides the scenario's pad weight matrix when computing
    ``penalty_total`` (cost variants pass their own).
    """
    w = _as_waits(waits)
    if w.size != scenario.n:
        raise ValueError(f"wait vector has {w.size} entries for {scenario.n} requests")
    arr = scenario.arrays()
    wm = arr.weights if weights is None else weights
    pen = float(np.dot(penalty_weights_at(schedule.starts, arr.class_index, wm, arr.bin_width), w))
    n = w.size
    return MetricVector(
        avg_wait=float(w.sum()) / n,
        max_wait=float(w.max()),
        std_wait=float(np.std(w.astype(np.float64))),
        tail_95=tail_95(w),
        pct_no_wait=float(np.count_nonzero(w == 0)) / n,
        pct_long_wait=float(np.count_nonzero(w > LONG_WAIT_THRESHOLD)) / n,
        penalty_total=pen,
        throughput=n * 3600.0 / scenario.horizon,
        n=n,
    )


def improvement_rate(baseline: MetricVector, candidate: MetricVector, metric: str) -> float:
    """Percentage improvement of ``candidate`` over ``baseline``; positive is better."""
    base = getattr(baseline, metric)
    cand = getattr(candidate, metric)
    if base == 0:
        raise UndefinedMetricError(f"improvement rate undefined: baseline {metric} is zero")
    if metric in COST_LIKE:
        return (base - cand) / base * 100.0
    if metric in BENEFIT_LIKE:
        return (cand - base) / base * 100.0
    raise KeyError(f"unknown metric {metric!r}")


def format_duration(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 60:02d}m {s % 60:02d}s"
