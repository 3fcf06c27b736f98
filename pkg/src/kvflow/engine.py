"""The slot-stepped serving engine.

Each slot advances through five fixed phases:

1. arrivals      -- new requests append to the waiting queue
2. activation    -- the policy's ActivationDecision is applied, in order
3. overflow      -- the projected end-of-slot usage is compared to the
                    budget; while it exceeds, the policy's EvictionDecision
                    is applied and the check repeats
4. decode        -- every active request emits one token
5. completion    -- requests whose generated count reached decode_len
                    release their cache at the end of the slot

The projected usage equals sum(prompt_len + generated + 1) over the active
set, which is exactly the end-of-slot usage after decode, so the recorded
per-slot usage never exceeds the budget. A completing request still counts
its full prompt_len + decode_len in its final slot.

Requests decode one token per slot without exception, so the engine never
loops over the active set: completions are booked into a calendar at
activation time and usage is maintained incrementally. An evicted request
loses all generated tokens and rejoins the waiting queue at its original
arrival position.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from kvflow.core import (
    EngineError,
    OversizedRequestError,
    Request,
    SimState,
    WaitingQueue,
)
from kvflow.policies import Policy, PolicyView
from kvflow.workload import ArrivalStream

POLICY_STREAM_TAG = 1

PHASES = ("arrivals", "activation", "overflow_check", "decode", "completion")

EVENT_ARRIVE = "arrive"
EVENT_ACTIVATE = "activate"
EVENT_EVICT = "evict"
EVENT_DECODE = "decode_step"
EVENT_COMPLETE = "complete"
EVENT_OVERFLOW = "overflow"

EVENT_FIELDS = ("slot", "kind", "request_id", "usage_after")


@dataclass(frozen=True)
class LinearSlotCost:
    """Wall-time cost of one slot: base + per-token prefill/decode terms.

    The default (1, 0, 0) makes a slot cost exactly one time unit. The
    model only rescales reported throughput denominators; it never feeds
    back into scheduling.
    """

    base: float = 1.0
    per_prefill_token: float = 0.0
    per_decode_token: float = 0.0

    def __post_init__(self) -> None:
        if self.base < 0 or self.per_prefill_token < 0 or self.per_decode_token < 0:
            raise ValueError("slot cost coefficients must be nonnegative")

    def cost(self, prefill_tokens: int, decode_tokens: int) -> float:
        return (
            self.base
            + self.per_prefill_token * prefill_tokens
            + self.per_decode_token * decode_tokens
        )


def slot_cost(
    prefill_tokens: int, decode_tokens: int, model: Optional[LinearSlotCost] = None
) -> float:
    """Wall-time cost of a slot that prefilled and decoded the given token counts."""
    model = model or LinearSlotCost()
    return model.cost(prefill_tokens, decode_tokens)


@dataclass
class RunResult:
    """Everything one run produced: series, counters, and completions.

    usage[t-1] is the peak end-of-slot usage U_t (completing requests
    still counted); waiting_len / active_len are post-release queue sizes.
    budgets holds the per-slot activation budget drawn by the policy, or
    -1 where the policy has none. completed_* arrays are aligned records
    of every completed request.
    """

    policy_name: str
    kv_capacity: int
    horizon: int
    seed: int
    usage: np.ndarray
    waiting_len: np.ndarray
    active_len: np.ndarray
    budgets: np.ndarray
    prefill_tokens: np.ndarray
    decode_tokens: np.ndarray
    completed_arrival: np.ndarray
    completed_slot: np.ndarray
    completed_decode_len: np.ndarray
    completed_prompt_len: np.ndarray
    arrivals_total: int
    overflow_slots: int
    eviction_count: int
    wasted_tokens: int
    generated_tokens: int
    final_waiting: int
    final_active: int
    class_waiting: Optional[np.ndarray] = None
    class_arrivals: Optional[np.ndarray] = None
    exhausted_slot: Optional[int] = None
    events: Optional[List[Tuple[int, str, int, int]]] = None

    @property
    def completed_count(self) -> int:
        return len(self.completed_slot)

    @property
    def max_usage(self) -> int:
        return int(self.usage.max()) if len(self.usage) else 0

    def latencies(self) -> np.ndarray:
        """Completion slot minus arrival slot, inclusive of both ends."""
        return self.completed_slot - self.completed_arrival + 1

    def unfinished(self) -> np.ndarray:
        return self.waiting_len + self.active_len

    def as_dict(self, include_series: bool = True) -> dict:
        doc = {
            "policy": self.policy_name,
            "kv_capacity": self.kv_capacity,
            "horizon": self.horizon,
            "seed": self.seed,
            "arrivals_total": self.arrivals_total,
            "completed": self.completed_count,
            "overflow_slots": self.overflow_slots,
            "eviction_count": self.eviction_count,
            "wasted_tokens": self.wasted_tokens,
            "generated_tokens": self.generated_tokens,
            "final_waiting": self.final_waiting,
            "final_active": self.final_active,
            "max_usage": self.max_usage,
            "exhausted_slot": self.exhausted_slot,
        }
        if include_series:
            doc["series"] = {
                "usage": self.usage.tolist(),
                "waiting_len": self.waiting_len.tolist(),
                "active_len": self.active_len.tolist(),
                "budgets": self.budgets.tolist(),
                "prefill_tokens": self.prefill_tokens.tolist(),
                "decode_tokens": self.decode_tokens.tolist(),
            }
        return doc

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=1)
            fh.write("\n")

    def write_series_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "usage", "waiting", "active", "budget", "prefill_tokens", "decode_tokens"])
            for i in range(self.horizon):
                w.writerow(
                    [
                        i + 1,
                        int(self.usage[i]),
                        int(self.waiting_len[i]),
                        int(self.active_len[i]),
                        int(self.budgets[i]),
                        int(self.prefill_tokens[i]),
                        int(self.decode_tokens[i]),
                    ]
                )


def write_events_csv(events: Iterable[Tuple[int, str, int, int]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_FIELDS)
        for row in events:
            w.writerow(row)


class Engine:
    """Drives one policy over one arrival stream, slot by slot."""

    def __init__(
        self,
        policy: Policy,
        kv_capacity: int,
        seed: int = 0,
        record_events: bool = False,
        track_classes: Optional[int] = None,
    ) -> None:
        if kv_capacity <= 0:
            raise ValueError(f"kv_capacity must be positive, got {kv_capacity}")
        self.policy = policy
        self.state = SimState.fresh(kv_capacity, seed)
        self.record_events = record_events
        self.events: List[Tuple[int, str, int, int]] = []
        self._calendar: Dict[int, List[Tuple[int, int]]] = {}
        self._additions: List[Request] = []
        self._completions: List[int] = []
        self._view = PolicyView(
            clock=0,
            kv_capacity=kv_capacity,
            usage=0,
            waiting=self.state.waiting,
            active=self.state.active,
            additions=self._additions,
            completions=self._completions,
        )
        self._track_classes = track_classes
        self._class_waiting = [0] * track_classes if track_classes else None
        # counters
        self.arrivals_total = 0
        self.overflow_slots = 0
        self.eviction_count = 0
        self.wasted_tokens = 0
        self.generated_tokens = 0
        # series
        self.series_usage: List[int] = []
        self.series_waiting: List[int] = []
        self.series_active: List[int] = []
        self.series_budget: List[int] = []
        self.series_prefill: List[int] = []
        self.series_decode: List[int] = []
        self.series_class_waiting: List[Tuple[int, ...]] = []
        # completion records
        self.completed_arrival: List[int] = []
        self.completed_slot: List[int] = []
        self.completed_decode_len: List[int] = []
        self.completed_prompt_len: List[int] = []
        policy.reset(np.random.SeedSequence([int(seed), POLICY_STREAM_TAG]))

    def step(self, slot_requests: Sequence[Request]) -> None:
        """Advance one slot through the five phases."""
        state = self.state
        t = state.clock + 1
        state.clock = t
        kv = state.kv_capacity
        active = state.active
        waiting = state.waiting
        record = self.record_events
        class_waiting = self._class_waiting
        requests = state.requests
        additions = self._additions
        events = self.events

        # phase 1: arrivals
        if slot_requests:
            push = waiting.push
            for r in slot_requests:
                rid = r.id
                if rid in requests:
                    raise EngineError(f"duplicate request id {rid}")
                requests[rid] = r
                push(r)
                if class_waiting is not None and r.class_id is not None:
                    class_waiting[r.class_id] += 1
            self.arrivals_total += len(slot_requests)
            additions.extend(slot_requests)
            if record:
                usage_now = state.usage_total
                for r in slot_requests:
                    events.append((t, EVENT_ARRIVE, r.id, usage_now))

        # phase 2: activation
        view = self._view
        view.clock = t
        view.usage = state.usage_total
        decision = self.policy.decide(view)
        projected = state.usage_total + len(active)
        prefill = 0
        to_activate = decision.to_activate
        if to_activate:
            calendar = self._calendar
            seen = set()
            for rid in to_activate:
                if rid in seen:
                    raise EngineError(f"duplicate id {rid} in activation decision")
                seen.add(rid)
                if rid not in waiting:
                    raise EngineError(f"policy activated id {rid} which is not waiting")
                r = requests[rid]
                lp = r.prompt_len
                if lp + 1 > kv:
                    raise OversizedRequestError(
                        f"request {rid} needs {lp + 1} tokens in its first "
                        f"slot but the budget is {kv}"
                    )
                waiting.remove(rid)
                if class_waiting is not None and r.class_id is not None:
                    class_waiting[r.class_id] -= 1
                r.activation_slot = t
                active[rid] = r
                projected += lp + 1
                prefill += lp
                end = t + r.decode_len - 1
                booked = calendar.get(end)
                if booked is None:
                    calendar[end] = [(rid, t)]
                else:
                    booked.append((rid, t))
                if record:
                    events.append((t, EVENT_ACTIVATE, rid, projected))
        self.series_budget.append(-1 if decision.budget is None else decision.budget)

        # phase 3: overflow check and repair
        overflowed = False
        while projected > kv:
            if not overflowed:
                overflowed = True
                self.overflow_slots += 1
                if record:
                    events.append((t, EVENT_OVERFLOW, -1, projected))
            eviction = self.policy.evict(view, projected - kv)
            if not eviction.to_evict:
                raise EngineError(
                    "policy returned an empty eviction while usage is over budget"
                )
            evicted = 0
            wasted = 0
            for rid in eviction.to_evict:
                r = active.pop(rid, None)
                if r is None:
                    raise EngineError(f"policy evicted id {rid} which is not active")
                generated = t - r.activation_slot
                wasted += generated
                evicted += 1
                r.evictions += 1
                r.activation_slot = None
                projected -= r.prompt_len + generated + 1
                waiting.readmit(r)
                if class_waiting is not None and r.class_id is not None:
                    class_waiting[r.class_id] += 1
                additions.append(r)
                if record:
                    events.append((t, EVENT_EVICT, rid, projected))
            self.wasted_tokens += wasted
            self.eviction_count += evicted
            if projected > kv and not active:
                raise EngineError(
                    f"usage {projected} still exceeds budget {kv} with nothing "
                    "left to evict"
                )

        # phase 4: decode (implicit: every active request advances one token)
        usage_end = projected
        decode_count = len(active)
        self.generated_tokens += decode_count
        if record:
            for rid in active:
                events.append((t, EVENT_DECODE, rid, usage_end))

        # phase 5: completions release at end of slot
        self.series_usage.append(usage_end)
        due = self._calendar.pop(t, None)
        if due:
            completions = self._completions
            completed_arrival = self.completed_arrival
            completed_slot = self.completed_slot
            completed_decode_len = self.completed_decode_len
            completed_prompt_len = self.completed_prompt_len
            for rid, activation_slot in due:
                r = active.get(rid)
                if r is None or r.activation_slot != activation_slot:
                    continue  # stale booking: the request was evicted meanwhile
                del active[rid]
                r.completion_slot = t
                usage_end -= r.prompt_len + r.decode_len
                completed_arrival.append(r.arrival_slot)
                completed_slot.append(t)
                completed_decode_len.append(r.decode_len)
                completed_prompt_len.append(r.prompt_len)
                completions.append(rid)
                if record:
                    events.append((t, EVENT_COMPLETE, rid, usage_end))
        state.usage_total = usage_end

        self.series_waiting.append(len(waiting))
        self.series_active.append(len(active))
        self.series_prefill.append(prefill)
        self.series_decode.append(decode_count)
        if class_waiting is not None:
            self.series_class_waiting.append(tuple(class_waiting))

    def result(self, exhausted_slot: Optional[int] = None) -> RunResult:
        as_i64 = lambda xs: np.asarray(xs, dtype=np.int64)
        return RunResult(
            policy_name=self.policy.name,
            kv_capacity=self.state.kv_capacity,
            horizon=self.state.clock,
            seed=self.state.rng_seed,
            usage=as_i64(self.series_usage),
            waiting_len=as_i64(self.series_waiting),
            active_len=as_i64(self.series_active),
            budgets=as_i64(self.series_budget),
            prefill_tokens=as_i64(self.series_prefill),
            decode_tokens=as_i64(self.series_decode),
            completed_arrival=as_i64(self.completed_arrival),
            completed_slot=as_i64(self.completed_slot),
            completed_decode_len=as_i64(self.completed_decode_len),
            completed_prompt_len=as_i64(self.completed_prompt_len),
            arrivals_total=self.arrivals_total,
            overflow_slots=self.overflow_slots,
            eviction_count=self.eviction_count,
            wasted_tokens=self.wasted_tokens,
            generated_tokens=self.generated_tokens,
            final_waiting=len(self.state.waiting),
            final_active=len(self.state.active),
            class_waiting=(
                as_i64(self.series_class_waiting) if self._class_waiting is not None else None
            ),
            exhausted_slot=exhausted_slot,
            events=self.events if self.record_events else None,
        )


def run(
    arrivals: Union[ArrivalStream, Sequence[Sequence[Request]]],
    policy: Policy,
    kv_capacity: int,
    seed: int = 0,
    record_events: bool = False,
    track_classes: Optional[int] = None,
) -> RunResult:
    """Run a policy over a materialized arrival stream.

    track_classes sizes an optional per-class waiting-count series (pass
    the class count). Identical inputs produce bit-identical results,
    event logs included.
    """
    if isinstance(arrivals, ArrivalStream):
        slots = arrivals.slots
        exhausted = arrivals.exhausted_slot
        counts = arrivals.class_counts
    else:
        slots = arrivals
        exhausted = None
        counts = None
    engine = Engine(
        policy,
        kv_capacity,
        seed=seed,
        record_events=record_events,
        track_classes=track_classes,
    )
    for slot_requests in slots:
        engine.step(slot_requests)
    result = engine.result(exhausted_slot=exhausted)
    if counts is not None and track_classes:
        result.class_arrivals = counts
    return result
