"""Core state types and memory accounting for the slotted serving model.

Time advances in unit slots. Every active request decodes exactly one token
per slot, so a request admitted with prompt length l holds l + j cache
tokens during the slot where it emits its j-th output token. The footprint
peaks at l + o in the final slot and the cache is released at the end of
that slot. A request that is activated in slot t emits its first token in
slot t, i.e. it already holds l + 1 at the end of its activation slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Tuple, Union

Rate = Union[int, float, Fraction]


class EngineError(RuntimeError):
    """A policy or engine contract was violated mid-run."""


class OversizedRequestError(EngineError):
    """A single request cannot fit in the cache even when served alone."""


@dataclass(frozen=True)
class RequestClass:
    """A (prompt length, output length) request type with an arrival rate.

    rate is the mean number of arrivals of this class per slot.
    """

    prompt_len: int
    decode_len: int
    rate: Rate

    def __post_init__(self) -> None:
        if self.prompt_len <= 0:
            raise ValueError(f"prompt_len must be positive, got {self.prompt_len}")
        if self.decode_len <= 0:
            raise ValueError(f"decode_len must be positive, got {self.decode_len}")
        if self.rate < 0:
            raise ValueError(f"rate must be nonnegative, got {self.rate}")

    @property
    def lifetime_tokens(self) -> int:
        return workload_tokens(self.prompt_len, self.decode_len)


@dataclass(slots=True)
class Request:
    """One request plus its engine-owned lifecycle state.

    decode_len is always stored (the engine needs it to schedule the
    completion), but policies only see it when output_known is true.
    activation_slot is None while the request waits; eviction clears it and
    discards all generated tokens, so progress restarts on re-activation.
    """

    id: int
    prompt_len: int
    decode_len: int
    arrival_slot: int
    class_id: Optional[int] = None
    output_known: bool = True
    activation_slot: Optional[int] = None
    completion_slot: Optional[int] = None
    evictions: int = 0

    def sort_key(self) -> Tuple[int, int]:
        return (self.arrival_slot, self.id)


def workload_tokens(prompt_len: int, decode_len: int) -> int:
    """Total cache token-slots one request occupies over its lifetime.

    Summing the per-slot footprint l + j over output positions j = 1..o
    gives l*o + (o + o^2)/2, which is always an integer.
    """
    if prompt_len <= 0 or decode_len <= 0:
        raise ValueError(
            f"lengths must be positive, got prompt_len={prompt_len} decode_len={decode_len}"
        )
    return prompt_len * decode_len + (decode_len + decode_len * decode_len) // 2


class WaitingQueue:
    """Waiting requests ordered by (arrival_slot, id).

    New arrivals append in key order. Evicted requests re-enter at their
    original arrival position, ahead of anything that arrived later; they
    sit in a small side list that is sorted lazily and merge-iterated with
    the main one. Removal is O(1) when it hits either list head, which is
    the common case for FIFO-ish policies; main-list removals elsewhere are
    tombstoned by id (an id never re-enters the main list) and compacted
    once tombstones outnumber the live entries.
    """

    __slots__ = ("_main", "_readmit", "_mdead", "_ids", "_mhead", "_rhead", "_rdirty")

    def __init__(self) -> None:
        self._main: list = []
        self._readmit: list = []
        self._mdead: set = set()
        self._ids: set = set()
        self._mhead = 0
        self._rhead = 0
        self._rdirty = False

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, req_id: int) -> bool:
        return req_id in self._ids

    def push(self, request: Request) -> None:
        """Append a fresh arrival. Keys must be nondecreasing over pushes."""
        self._main.append(request)
        self._ids.add(request.id)

    def readmit(self, request: Request) -> None:
        """Re-insert an evicted request at its original arrival position."""
        self._readmit.append(request)
        self._rdirty = True
        self._ids.add(request.id)

    def _settle(self) -> None:
        """Sort the live tail of the side list and drop its consumed prefix."""
        live = self._readmit[self._rhead :]
        live.sort(key=Request.sort_key)
        self._readmit = live
        self._rhead = 0
        self._rdirty = False

    def remove(self, req_id: int) -> None:
        if req_id not in self._ids:
            raise EngineError(f"request {req_id} is not waiting")
        self._ids.discard(req_id)
        side = self._readmit
        h = self._rhead
        if h < len(side):
            if not self._rdirty and side[h].id == req_id:
                self._rhead = h + 1
                if self._rhead == len(side):
                    side.clear()
                    self._rhead = 0
                return
            if self._rdirty:
                self._settle()
                side = self._readmit
                h = 0
            for i in range(h, len(side)):
                if side[i].id == req_id:
                    del side[i]
                    return
        main = self._main
        mdead = self._mdead
        mh = self._mhead
        if mh < len(main) and main[mh].id == req_id:
            mh += 1
            while mh < len(main) and main[mh].id in mdead:
                mdead.discard(main[mh].id)
                mh += 1
            self._mhead = mh
            if mh == len(main):
                main.clear()
                self._mhead = 0
            return
        mdead.add(req_id)
        if len(mdead) * 2 > len(main) - self._mhead:
            self._main = [r for r in main[self._mhead :] if r.id not in mdead]
            self._mhead = 0
            mdead.clear()

    def __iter__(self) -> Iterator[Request]:
        """Yield live entries in (arrival_slot, id) order."""
        if self._rdirty:
            self._settle()
        main = self._main
        side = self._readmit
        dead = self._mdead
        i = self._mhead
        j = self._rhead
        n = len(main)
        m = len(side)
        while j < m and i < n:
            a = main[i]
            if a.id in dead:
                i += 1
                continue
            b = side[j]
            if b.arrival_slot < a.arrival_slot or (
                b.arrival_slot == a.arrival_slot and b.id < a.id
            ):
                yield b
                j += 1
            else:
                yield a
                i += 1
        while j < m:
            yield side[j]
            j += 1
        while i < n:
            a = main[i]
            i += 1
            if a.id not in dead:
                yield a


@dataclass
class SimState:
    """Mutable simulator state: the clock, the queues, and the budget.

    active preserves activation order (most recent last), which is what
    last-in-first-out eviction walks backwards. usage_total is the
    incrementally maintained end-of-slot usage; usage() recomputes it from
    scratch as an independent cross-check.
    """

    kv_capacity: int
    rng_seed: int
    clock: int = 0
    waiting: WaitingQueue = field(default_factory=WaitingQueue)
    active: dict = field(default_factory=dict)
    requests: dict = field(default_factory=dict)
    usage_total: int = 0

    @classmethod
    def fresh(cls, kv_capacity: int, rng_seed: int) -> "SimState":
        if kv_capacity <= 0:
            raise ValueError(f"kv_capacity must be positive, got {kv_capacity}")
        return cls(kv_capacity=kv_capacity, rng_seed=rng_seed)


def usage(state: SimState) -> int:
    """Recompute end-of-slot cache usage over the active set.

    A request activated at slot s has generated clock - s + 1 tokens by the
    end of the current slot, so it holds prompt_len + clock - s + 1.
    """
    t = state.clock
    return sum(r.prompt_len + (t - r.activation_slot + 1) for r in state.active.values())


def peak_projection(
    entries: Iterable[Tuple[int, int, int]], horizon: int
) -> list:
    """Projected end-of-slot usage for each of the next `horizon` slots.

    entries are (prompt_len, generated, decode_len) triples for the active
    set. Every request decodes one token per slot and leaves at the end of
    the slot where generated reaches decode_len, so the entry at offset d
    counts prompt_len + generated + d for exactly the requests with
    generated + d <= decode_len.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    totals = [0] * horizon
    for prompt_len, generated, decode_len in entries:
        span = min(decode_len - generated, horizon)
        base = prompt_len + generated
        for d in range(1, span + 1):
            totals[d - 1] += base + d
    return totals
