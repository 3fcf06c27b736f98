"""Workload specification, arrival generation, and trace ingestion.

Arrival counts are Poisson-distributed per slot. Sampling goes through CDF
inversion driven by uniforms from a PCG64 generator, so a (spec, seed) pair
reproduces the exact same stream on any platform regardless of the numpy
version's own poisson() implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from kvflow.core import Rate, Request, RequestClass, workload_tokens

ARRIVAL_STREAM_TAG = 0


def poisson_counts(rate: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Sample `size` Poisson(rate) counts by inverting uniforms.

    Vectorized over draws: walk the CDF upward, adding one to every draw
    whose uniform still exceeds it. The loop also stops once the pmf term
    underflows, which truncates a tail whose mass is far below float
    resolution.
    """
    if rate < 0:
        raise ValueError(f"rate must be nonnegative, got {rate}")
    counts = np.zeros(size, dtype=np.int64)
    if rate == 0 or size == 0:
        return counts
    u = rng.random(size)
    pmf = np.exp(-rate)
    cdf = pmf
    k = 0
    pending = u > cdf
    while pending.any() and pmf > 0.0:
        k += 1
        pmf *= rate / k
        cdf += pmf
        counts[pending] += 1
        pending = u > cdf
    return counts


@dataclass(frozen=True)
class TraceRecord:
    """One (prompt length, output length) pair taken from a trace file."""

    prompt_len: int
    decode_len: int
    source_id: Optional[Union[int, str]] = None
    line_no: Optional[int] = None


@dataclass(frozen=True)
class WorkloadSpec:
    """Describes how requests arrive: synthetic class mix or trace replay.

    kind "synthetic" draws an independent Poisson(rate_k) count per class
    per slot. kind "trace" draws one Poisson(rate) count per slot and
    consumes trace records in file order. outputs_known controls whether
    policies may observe decode lengths.
    """

    kind: str
    horizon: int
    seed: int = 0
    outputs_known: bool = True
    classes: Optional[Tuple[RequestClass, ...]] = None
    records: Optional[Tuple[TraceRecord, ...]] = None
    rate: Optional[Rate] = None
    trace_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.kind == "synthetic":
            if not self.classes:
                raise ValueError("synthetic workload needs at least one class")
        elif self.kind == "trace":
            if self.records is None:
                raise ValueError("trace workload needs records")
            if self.rate is None or self.rate < 0:
                raise ValueError("trace workload needs a nonnegative rate")
        else:
            raise ValueError(f"unknown workload kind {self.kind!r}")

    @classmethod
    def synthetic(
        cls,
        classes: Sequence[RequestClass],
        horizon: int,
        seed: int = 0,
        outputs_known: bool = True,
    ) -> "WorkloadSpec":
        return cls(
            kind="synthetic",
            horizon=horizon,
            seed=seed,
            outputs_known=outputs_known,
            classes=tuple(classes),
        )

    @classmethod
    def from_trace(
        cls,
        records: Sequence[TraceRecord],
        rate: Rate,
        horizon: int,
        seed: int = 0,
        outputs_known: bool = False,
        trace_path: Optional[str] = None,
    ) -> "WorkloadSpec":
        return cls(
            kind="trace",
            horizon=horizon,
            seed=seed,
            outputs_known=outputs_known,
            records=tuple(records),
            rate=rate,
            trace_path=trace_path,
        )

    def length_distribution(self) -> "LengthDistribution":
        if self.kind == "synthetic":
            return LengthDistribution.from_classes(self.classes)
        return LengthDistribution.from_records(self.records)

    def total_rate(self) -> Fraction:
        if self.kind == "synthetic":
            return sum((Fraction(c.rate) for c in self.classes), Fraction(0))
        return Fraction(self.rate)


@dataclass
class ArrivalStream:
    """Materialized arrivals: one list of Requests per slot, 1-based slots.

    class_counts[t-1, k] is the number of class-k arrivals in slot t for
    synthetic workloads (None for traces). exhausted_slot is the 1-based
    slot where a trace ran out of records, if it did; later slots get no
    arrivals.
    """

    slots: List[List[Request]]
    horizon: int
    total: int
    class_counts: Optional[np.ndarray] = None
    exhausted_slot: Optional[int] = None

    def __iter__(self):
        return iter(self.slots)


def generate_arrivals(spec: WorkloadSpec, seed: Optional[int] = None) -> ArrivalStream:
    """Materialize the arrival stream for a spec.

    The explicit seed argument overrides spec.seed; identical inputs yield
    bit-identical streams. Request ids are assigned 1, 2, ... in arrival
    order (slot by slot; within a slot, class order for synthetic
    workloads, file order for traces).
    """
    run_seed = spec.seed if seed is None else seed
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(run_seed), ARRIVAL_STREAM_TAG]))
    )
    if spec.kind == "synthetic":
        return _generate_synthetic(spec, rng)
    return _generate_trace(spec, rng)


def _generate_synthetic(spec: WorkloadSpec, rng: np.random.Generator) -> ArrivalStream:
    horizon = spec.horizon
    classes = spec.classes
    counts = np.zeros((horizon, len(classes)), dtype=np.int64)
    for k, cls in enumerate(classes):
        counts[:, k] = poisson_counts(float(cls.rate), horizon, rng)
    slots: List[List[Request]] = []
    next_id = 1
    known = spec.outputs_known
    for t in range(1, horizon + 1):
        row = counts[t - 1]
        slot: List[Request] = []
        for k, cls in enumerate(classes):
            for _ in range(int(row[k])):
                slot.append(
                    Request(
                        id=next_id,
                        prompt_len=cls.prompt_len,
                        decode_len=cls.decode_len,
                        arrival_slot=t,
                        class_id=k,
                        output_known=known,
                    )
                )
                next_id += 1
        slots.append(slot)
    return ArrivalStream(
        slots=slots,
        horizon=horizon,
        total=next_id - 1,
        class_counts=counts,
    )


def _generate_trace(spec: WorkloadSpec, rng: np.random.Generator) -> ArrivalStream:
    horizon = spec.horizon
    counts = poisson_counts(float(spec.rate), horizon, rng)
    records = spec.records
    slots: List[List[Request]] = []
    next_id = 1
    cursor = 0
    exhausted_slot: Optional[int] = None
    known = spec.outputs_known
    for t in range(1, horizon + 1):
        want = int(counts[t - 1])
        slot: List[Request] = []
        for _ in range(want):
            if cursor >= len(records):
                if exhausted_slot is None:
                    exhausted_slot = t
                break
            rec = records[cursor]
            cursor += 1
            slot.append(
                Request(
                    id=next_id,
                    prompt_len=rec.prompt_len,
                    decode_len=rec.decode_len,
                    arrival_slot=t,
                    class_id=None,
                    output_known=known,
                )
            )
            next_id += 1
        slots.append(slot)
    return ArrivalStream(
        slots=slots,
        horizon=horizon,
        total=next_id - 1,
        exhausted_slot=exhausted_slot,
    )


@dataclass
class IngestResult:
    """Outcome of reading a trace file.

    malformed holds (line number, reason) pairs for skipped lines;
    dropped_zero counts records whose prompt or output length was zero.
    """

    records: List[TraceRecord]
    total_lines: int
    malformed: List[Tuple[int, str]]
    dropped_zero: int


def ingest_trace(path: Union[str, Path], fmt: str = "jsonl") -> IngestResult:
    """Read a trace file into TraceRecords, in file order.

    fmt "jsonl" expects objects with integer prompt_tokens / output_tokens
    (optional id); fmt "raw_pairs" expects prompt / response strings whose
    lengths are taken as whitespace word counts. Malformed lines are
    skipped and reported with their line number; zero-length records are
    dropped and counted. An unreadable file raises OSError.
    """
    if fmt not in ("jsonl", "raw_pairs"):
        raise ValueError(f"unknown trace format {fmt!r}")
    records: List[TraceRecord] = []
    malformed: List[Tuple[int, str]] = []
    dropped_zero = 0
    total = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            total += 1
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                malformed.append((line_no, f"invalid json: {exc.msg}"))
                continue
            if not isinstance(obj, dict):
                malformed.append((line_no, "not an object"))
                continue
            if fmt == "jsonl":
                parsed = _parse_token_counts(obj)
            else:
                parsed = _parse_raw_pair(obj)
            if isinstance(parsed, str):
                malformed.append((line_no, parsed))
                continue
            prompt_len, decode_len, source_id = parsed
            if prompt_len <= 0 or decode_len <= 0:
                dropped_zero += 1
                continue
            records.append(
                TraceRecord(
                    prompt_len=prompt_len,
                    decode_len=decode_len,
                    source_id=source_id,
                    line_no=line_no,
                )
            )
    return IngestResult(
        records=records, total_lines=total, malformed=malformed, dropped_zero=dropped_zero
    )


def _parse_token_counts(obj: dict):
    try:
        prompt = obj["prompt_tokens"]
        output = obj["output_tokens"]
    except KeyError as exc:
        return f"missing field {exc.args[0]}"
    if isinstance(prompt, bool) or isinstance(output, bool):
        return "token counts must be integers"
    if not isinstance(prompt, int) or not isinstance(output, int):
        return "token counts must be integers"
    if prompt < 0 or output < 0:
        return "token counts must be nonnegative"
    return prompt, output, obj.get("id")


def _parse_raw_pair(obj: dict):
    try:
        prompt = obj["prompt"]
        response = obj["response"]
    except KeyError as exc:
        return f"missing field {exc.args[0]}"
    if not isinstance(prompt, str) or not isinstance(response, str):
        return "prompt and response must be strings"
    return len(prompt.split()), len(response.split()), obj.get("id")


def _nearest_rank(sorted_values: Sequence[int], pct: int) -> int:
    n = len(sorted_values)
    rank = max(1, -(-pct * n // 100))
    return sorted_values[rank - 1]


@dataclass
class LengthSummary:
    count: int
    prompt_mean: float
    output_mean: float
    prompt_percentiles: dict
    output_percentiles: dict
    max_prompt: int
    max_output: int
    mean_workload: Fraction

    @property
    def max_len(self) -> int:
        return max(self.max_prompt, self.max_output)


def sample_lengths_summary(records: Sequence[TraceRecord]) -> LengthSummary:
    """Describe a record sample: length moments, percentiles, and the exact
    mean lifetime token cost."""
    if not records:
        raise ValueError("cannot summarize an empty record list")
    prompts = sorted(r.prompt_len for r in records)
    outputs = sorted(r.decode_len for r in records)
    n = len(records)
    total_w = sum(workload_tokens(r.prompt_len, r.decode_len) for r in records)
    pcts = (50, 90, 95, 99)
    return LengthSummary(
        count=n,
        prompt_mean=sum(prompts) / n,
        output_mean=sum(outputs) / n,
        prompt_percentiles={p: _nearest_rank(prompts, p) for p in pcts},
        output_percentiles={p: _nearest_rank(outputs, p) for p in pcts},
        max_prompt=prompts[-1],
        max_output=outputs[-1],
        mean_workload=Fraction(total_w, n),
    )


class LengthDistribution:
    """A weighted set of (prompt length, output length) pairs.

    Used by the load analyzers: the mean lifetime cost is kept exact as a
    Fraction, and max_len bounds every length in the support (the constant
    the overflow bound calls C).
    """

    def __init__(self, pairs: Sequence[Tuple[int, int]], weights: Sequence[Rate]):
        if not pairs:
            raise ValueError("distribution needs at least one pair")
        if len(pairs) != len(weights):
            raise ValueError("pairs and weights must have equal length")
        total = sum((Fraction(w) for w in weights), Fraction(0))
        if total <= 0:
            raise ValueError("weights must have positive total")
        self.pairs = [(int(l), int(o)) for l, o in pairs]
        self.weights = [Fraction(w) for w in weights]
        self._total = total

    @classmethod
    def from_classes(cls, classes: Sequence[RequestClass]) -> "LengthDistribution":
        return cls(
            [(c.prompt_len, c.decode_len) for c in classes],
            [c.rate for c in classes],
        )

    @classmethod
    def from_records(cls, records: Sequence[TraceRecord]) -> "LengthDistribution":
        return cls([(r.prompt_len, r.decode_len) for r in records], [1] * len(records))

    def mean_workload(self) -> Fraction:
        acc = Fraction(0)
        for (l, o), w in zip(self.pairs, self.weights):
            acc += Fraction(w) * workload_tokens(l, o)
        return acc / self._total

    def max_len(self) -> int:
        return max(max(l, o) for l, o in self.pairs)

    def max_footprint(self) -> int:
        return max(l + o for l, o in self.pairs)
