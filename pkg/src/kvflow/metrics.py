"""Evaluation metrics computed from a finished run.

Latency counts both endpoints: a request arriving and finishing in the
same slot has latency 1, never 0. Requests still unfinished at the end
of the run are excluded from latency statistics (right-censoring) but
do count in the queue growth slope. Token throughput counts only the
retained decode tokens of completed requests; evicted work is reported
separately as wasted_tokens, and a variant that credits evicted work is
kept as an auxiliary column.

Throughput ratios are exposed as exact fractions so that, for example,
request_throughput * horizon reproduces the completed count with no
float rounding. The CSV row stores the integer numerators alongside
float renderings, which keeps the row round-trippable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from kvflow.engine import (
    EVENT_ACTIVATE,
    EVENT_ARRIVE,
    EVENT_COMPLETE,
    EVENT_DECODE,
    EVENT_EVICT,
    EVENT_OVERFLOW,
    RunResult,
)

GROWTH_THRESHOLD = 0.01  # requests per slot
MIN_SLOPE_HORIZON = 1000  # shorter runs give an inconclusive verdict


def nearest_rank(n: int, pct_num: int = 95, pct_den: int = 100) -> int:
    """1-based order statistic index: ceil(pct * n) without float error."""
    if n <= 0:
        raise ValueError("need at least one observation")
    return -((-pct_num * n) // pct_den)


def least_squares_slope(y: Sequence[float]) -> float:
    """Slope of the ordinary least squares line through (1, y1)..(n, yn)."""
    arr = np.asarray(y, dtype=np.float64)
    n = len(arr)
    if n < 2:
        return 0.0
    t = np.arange(1, n + 1, dtype=np.float64)
    tc = t - t.mean()
    return float(np.dot(tc, arr - arr.mean()) / np.dot(tc, tc))


# CSV column order. Integer columns come first so an exact report can be
# rebuilt from them; the float columns are renderings for plotting.
CSV_FIELDS = (
    "policy",
    "seed",
    "horizon",
    "kv_capacity",
    "arrivals",
    "completed",
    "unfinished",
    "latency_sum",
    "p95_latency",
    "retained_tokens",
    "wasted_tokens",
    "overflow_events",
    "eviction_events",
    "avg_latency",
    "request_throughput",
    "token_throughput",
    "token_throughput_incl_wasted",
    "kv_util_mean",
    "kv_util_max",
    "kv_util_std",
    "queue_growth_slope",
)


@dataclass(frozen=True)
class MetricsReport:
    """Summary metrics of one run.

    latency_sum is the integer sum of completed-request latencies, so
    avg_latency = latency_sum / completed stays exact. p95_latency is the
    nearest-rank order statistic (None with zero completions). Utilization
    stats summarize U_t / kv_capacity over all recorded slots.
    """

    policy: str
    seed: int
    horizon: int
    kv_capacity: int
    arrivals: int
    completed: int
    unfinished: int
    latency_sum: int
    p95_latency: Optional[int]
    retained_tokens: int
    wasted_tokens: int
    overflow_events: int
    eviction_events: int
    kv_util_mean: float
    kv_util_max: float
    kv_util_std: float
    queue_growth_slope: float

    @property
    def avg_latency(self) -> Optional[Fraction]:
        if self.completed == 0:
            return None
        return Fraction(self.latency_sum, self.completed)

    @property
    def request_throughput(self) -> Fraction:
        if self.horizon == 0:
            return Fraction(0)
        return Fraction(self.completed, self.horizon)

    @property
    def token_throughput(self) -> Fraction:
        if self.horizon == 0:
            return Fraction(0)
        return Fraction(self.retained_tokens, self.horizon)

    @property
    def token_throughput_incl_wasted(self) -> Fraction:
        """Same ratio with evicted work credited; auxiliary column only."""
        if self.horizon == 0:
            return Fraction(0)
        return Fraction(self.retained_tokens + self.wasted_tokens, self.horizon)

    def as_dict(self) -> dict:
        avg = self.avg_latency
        return {
            "policy": self.policy,
            "seed": self.seed,
            "horizon": self.horizon,
            "kv_capacity": self.kv_capacity,
            "arrivals": self.arrivals,
            "completed": self.completed,
            "unfinished": self.unfinished,
            "latency_sum": self.latency_sum,
            "avg_latency": None if avg is None else float(avg),
            "p95_latency": self.p95_latency,
            "request_throughput": float(self.request_throughput),
            "token_throughput": float(self.token_throughput),
            "token_throughput_incl_wasted": float(self.token_throughput_incl_wasted),
            "retained_tokens": self.retained_tokens,
            "wasted_tokens": self.wasted_tokens,
            "overflow_events": self.overflow_events,
            "eviction_events": self.eviction_events,
            "kv_utilization": {
                "mean": self.kv_util_mean,
                "max": self.kv_util_max,
                "std": self.kv_util_std,
            },
            "queue_growth_slope": self.queue_growth_slope,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=1)
            fh.write("\n")

    def to_csv_row(self) -> List[str]:
        avg = self.avg_latency
        vals = {
            "policy": self.policy,
            "seed": self.seed,
            "horizon": self.horizon,
            "kv_capacity": self.kv_capacity,
            "arrivals": self.arrivals,
            "completed": self.completed,
            "unfinished": self.unfinished,
            "latency_sum": self.latency_sum,
            "p95_latency": "" if self.p95_latency is None else self.p95_latency,
            "retained_tokens": self.retained_tokens,
            "wasted_tokens": self.wasted_tokens,
            "overflow_events": self.overflow_events,
            "eviction_events": self.eviction_events,
            "avg_latency": "" if avg is None else float(avg),
            "request_throughput": float(self.request_throughput),
            "token_throughput": float(self.token_throughput),
            "token_throughput_incl_wasted": float(self.token_throughput_incl_wasted),
            "kv_util_mean": self.kv_util_mean,
            "kv_util_max": self.kv_util_max,
            "kv_util_std": self.kv_util_std,
            "queue_growth_slope": self.queue_growth_slope,
        }
        return [str(vals[name]) for name in CSV_FIELDS]

    @classmethod
    def from_csv_row(cls, row: Sequence[str]) -> "MetricsReport":
        """Rebuild a report from a to_csv_row() line, exactly."""
        if len(row) != len(CSV_FIELDS):
            raise ValueError(f"expected {len(CSV_FIELDS)} columns, got {len(row)}")
        get = dict(zip(CSV_FIELDS, row))
        return cls(
            policy=get["policy"],
            seed=int(get["seed"]),
            horizon=int(get["horizon"]),
            kv_capacity=int(get["kv_capacity"]),
            arrivals=int(get["arrivals"]),
            completed=int(get["completed"]),
            unfinished=int(get["unfinished"]),
            latency_sum=int(get["latency_sum"]),
            p95_latency=None if get["p95_latency"] == "" else int(get["p95_latency"]),
            retained_tokens=int(get["retained_tokens"]),
            wasted_tokens=int(get["wasted_tokens"]),
            overflow_events=int(get["overflow_events"]),
            eviction_events=int(get["eviction_events"]),
            kv_util_mean=float(get["kv_util_mean"]),
            kv_util_max=float(get["kv_util_max"]),
            kv_util_std=float(get["kv_util_std"]),
            queue_growth_slope=float(get["queue_growth_slope"]),
        )


def write_metrics_csv(reports: Iterable[MetricsReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for report in reports:
            w.writerow(report.to_csv_row())


def read_metrics_csv(path) -> List[MetricsReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != list(CSV_FIELDS):
        raise ValueError(f"{path} is not a metrics table")
    return [MetricsReport.from_csv_row(row) for row in rows[1:]]


def _utilization(usage: np.ndarray, kv_capacity: int) -> Tuple[float, float, float]:
    if len(usage) == 0:
        return 0.0, 0.0, 0.0
    u = usage.astype(np.float64) / float(kv_capacity)
    return float(u.mean()), float(u.max()), float(u.std())


def _build_report(
    policy: str,
    seed: int,
    horizon: int,
    kv_capacity: int,
    arrivals: int,
    latencies: Sequence[int],
    retained_tokens: int,
    wasted_tokens: int,
    overflow_events: int,
    eviction_events: int,
    usage: np.ndarray,
    unfinished: np.ndarray,
) -> MetricsReport:
    n = len(latencies)
    if n:
        ordered = sorted(int(x) for x in latencies)
        latency_sum = sum(ordered)
        p95 = ordered[nearest_rank(n) - 1]
    else:
        latency_sum = 0
        p95 = None
    util_mean, util_max, util_std = _utilization(usage, kv_capacity)
    final_unfinished = int(unfinished[-1]) if len(unfinished) else 0
    return MetricsReport(
        policy=policy,
        seed=seed,
        horizon=horizon,
        kv_capacity=kv_capacity,
        arrivals=arrivals,
        completed=n,
        unfinished=final_unfinished,
        latency_sum=latency_sum,
        p95_latency=p95,
        retained_tokens=retained_tokens,
        wasted_tokens=wasted_tokens,
        overflow_events=overflow_events,
        eviction_events=eviction_events,
        kv_util_mean=util_mean,
        kv_util_max=util_max,
        kv_util_std=util_std,
        queue_growth_slope=least_squares_slope(unfinished),
    )


def compute_metrics(result: RunResult) -> MetricsReport:
    """Summarize a RunResult. Pure; identical inputs give identical reports."""
    return _build_report(
        policy=result.policy_name,
        seed=result.seed,
        horizon=result.horizon,
        kv_capacity=result.kv_capacity,
        arrivals=result.arrivals_total,
        latencies=result.latencies().tolist(),
        retained_tokens=int(result.completed_decode_len.sum()),
        wasted_tokens=result.wasted_tokens,
        overflow_events=result.overflow_slots,
        eviction_events=result.eviction_count,
        usage=result.usage,
        unfinished=result.unfinished(),
    )


def recompute_from_events(
    events: Sequence[Tuple[int, str, int, int]],
    kv_capacity: int,
    horizon: int,
    policy: str = "",
    seed: int = 0,
) -> MetricsReport:
    """Second, independent metrics pass over a raw event log.

    Replays the log without touching RunResult's counters or series:
    latencies come from arrive/complete pairs, retained tokens from the
    activate-to-complete span, wasted tokens from the activate-to-evict
    span, and the usage series from decode events (a slot with no decode
    events holds nothing, so its usage is 0). Used as an oracle for
    compute_metrics.
    """
    arrive_slot: Dict[int, int] = {}
    act_slot: Dict[int, int] = {}
    arrive_per_slot = np.zeros(horizon, dtype=np.int64)
    complete_per_slot = np.zeros(horizon, dtype=np.int64)
    usage = np.zeros(horizon, dtype=np.int64)
    latencies: List[int] = []
    retained = 0
    wasted = 0
    overflow = 0
    evictions = 0
    arrivals = 0
    for slot, kind, rid, usage_after in events:
        if not 1 <= slot <= horizon:
            raise ValueError(f"event slot {slot} outside horizon {horizon}")
        if kind == EVENT_ARRIVE:
            arrive_slot[rid] = slot
            arrive_per_slot[slot - 1] += 1
            arrivals += 1
        elif kind == EVENT_ACTIVATE:
            act_slot[rid] = slot
        elif kind == EVENT_EVICT:
            wasted += slot - act_slot.pop(rid)
            evictions += 1
        elif kind == EVENT_DECODE:
            usage[slot - 1] = usage_after
        elif kind == EVENT_COMPLETE:
            retained += slot - act_slot.pop(rid) + 1
            latencies.append(slot - arrive_slot.pop(rid) + 1)
            complete_per_slot[slot - 1] += 1
        elif kind == EVENT_OVERFLOW:
            overflow += 1
        else:
            raise ValueError(f"unknown event kind {kind!r}")
    unfinished = np.cumsum(arrive_per_slot) - np.cumsum(complete_per_slot)
    return _build_report(
        policy=policy,
        seed=seed,
        horizon=horizon,
        kv_capacity=kv_capacity,
        arrivals=arrivals,
        latencies=latencies,
        retained_tokens=retained,
        wasted_tokens=wasted,
        overflow_events=overflow,
        eviction_events=evictions,
        usage=usage,
        unfinished=unfinished,
    )


@dataclass(frozen=True)
class StabilityEstimate:
    """Empirical growth verdict from the tail of the unfinished-count series."""

    slope: float
    verdict: str  # "stable" | "growing" | "inconclusive"
    threshold: float
    window: int  # number of trailing slots the slope was fitted on


def stability_estimate(
    result: RunResult, threshold: float = GROWTH_THRESHOLD
) -> StabilityEstimate:
    """Fit a slope to the last half of the unfinished-count series.

    Runs shorter than MIN_SLOPE_HORIZON slots return verdict
    "inconclusive" (the fitted slope is still reported). Otherwise the
    verdict is "growing" when the slope exceeds the threshold.
    """
    unfinished = result.unfinished()
    n = len(unfinished)
    tail = unfinished[n // 2 :]
    slope = least_squares_slope(tail)
    if n < MIN_SLOPE_HORIZON:
        verdict = "inconclusive"
    elif slope > threshold:
        verdict = "growing"
    else:
        verdict = "stable"
    return StabilityEstimate(
        slope=slope, verdict=verdict, threshold=threshold, window=len(tail)
    )
