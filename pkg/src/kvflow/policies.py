"""Admission and eviction policies.

Every policy sees the simulator only through a PolicyView, which exposes
waiting and active requests as lightweight records and hides decode
lengths for requests whose output length is declared unknown. A policy is
a deterministic state machine over (view, internal state, seed stream):
decide() picks waiting requests to activate this slot, evict() names
active requests to remove when the projected usage overruns the budget.

Projection-based policies share an AdmissionPlanner, an incremental
feasibility oracle over the exact per-slot footprint trajectory.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right, insort
from collections import namedtuple
from dataclasses import dataclass, field
from fractions import Fraction
from heapq import heapify, heappop, heappush
from itertools import accumulate
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from kvflow.core import EngineError, Rate, Request

WaitingView = namedtuple(
    "WaitingView", ["id", "prompt_len", "class_id", "decode_len", "arrival_slot"]
)
ActiveView = namedtuple(
    "ActiveView", ["id", "prompt_len", "generated", "decode_len", "activation_slot"]
)


class PolicyApplicabilityError(ValueError):
    """The policy cannot run on this workload (e.g. hidden outputs)."""


def _waiting_view(r: Request) -> WaitingView:
    return WaitingView(
        r.id,
        r.prompt_len,
        r.class_id,
        r.decode_len if r.output_known else None,
        r.arrival_slot,
    )


class PolicyView:
    """Read-only window onto the simulator state for one slot.

    usage is the end-of-previous-slot cache usage. Active requests report
    generated as of before this slot's decode step, so a request activated
    in the current slot shows generated = 0. decode_len is None on both
    lists whenever the request's output length is hidden.
    """

    __slots__ = (
        "clock",
        "kv_capacity",
        "usage",
        "_waiting",
        "_active",
        "_additions",
        "_completions",
    )

    def __init__(
        self,
        clock: int,
        kv_capacity: int,
        usage: int,
        waiting: Iterable[Request],
        active: Dict[int, Request],
        additions: Optional[List[Request]] = None,
        completions: Optional[List[int]] = None,
    ) -> None:
        self.clock = clock
        self.kv_capacity = kv_capacity
        self.usage = usage
        self._waiting = waiting
        self._active = active
        self._additions = additions
        self._completions = completions

    @property
    def waiting_len(self) -> int:
        return len(self._waiting)

    @property
    def active_len(self) -> int:
        return len(self._active)

    def iter_waiting(self) -> Iterator[WaitingView]:
        for r in self._waiting:
            yield _waiting_view(r)

    def take_additions(self) -> List[WaitingView]:
        """Entries that joined the waiting queue since the last decide call.

        Arrivals and eviction re-entries both land here; policies that keep
        an internal index consume this instead of rescanning the queue.
        """
        if self._additions is None:
            added = [_waiting_view(r) for r in self._waiting]
        else:
            added = [_waiting_view(r) for r in self._additions]
            self._additions.clear()
        return added

    def take_completions(self) -> List[int]:
        """Ids of requests that finished since the last decide call.

        Complements take_additions for policies that mirror the active set:
        an id showing up here means the engine released it at the end of the
        previous slot.  Returns an empty list when the engine does not feed
        a completion buffer (hand-built views in tests).
        """
        if self._completions is None:
            return []
        done = list(self._completions)
        self._completions.clear()
        return done

    def active_ids(self) -> List[int]:
        """Active request ids in activation order (no view construction)."""
        return list(self._active.keys())

    def active_ids_reversed(self) -> List[int]:
        """Active request ids from most recently activated to oldest."""
        return list(reversed(self._active.keys()))

    def _active_view(self, r: Request) -> ActiveView:
        return ActiveView(
            r.id,
            r.prompt_len,
            self.clock - r.activation_slot,
            r.decode_len if r.output_known else None,
            r.activation_slot,
        )

    def iter_active(self) -> Iterator[ActiveView]:
        for r in self._active.values():
            yield self._active_view(r)

    def iter_active_reversed(self) -> Iterator[ActiveView]:
        """Active requests from most recently activated to oldest."""
        for r in reversed(self._active.values()):
            yield self._active_view(r)


@dataclass
class ActivationDecision:
    """Waiting request ids to activate this slot, in activation order.

    budget records the per-slot activation budget drawn by stochastic
    flow control (None for policies without one).
    """

    to_activate: List[int] = field(default_factory=list)
    budget: Optional[int] = None


@dataclass
class EvictionDecision:
    """Active request ids to evict, applied in order."""

    to_evict: List[int] = field(default_factory=list)


@dataclass(frozen=True)
class BudgetSpec:
    """Activation budget: per-class integer budgets or a scalar mean.

    A scalar budget b is realized per slot as floor(b) plus a Bernoulli
    trial on its fractional part, so the draw averages b and never exceeds
    cap (defaults to ceil(b)).
    """

    per_class: Optional[Tuple[int, ...]] = None
    scalar: Optional[Fraction] = None
    cap: Optional[int] = None

    @classmethod
    def for_classes(cls, budgets: Sequence[int]) -> "BudgetSpec":
        return cls(per_class=tuple(int(b) for b in budgets))

    @classmethod
    def for_scalar(cls, budget: Rate, cap: Optional[int] = None) -> "BudgetSpec":
        b = _as_fraction(budget)
        return cls(scalar=b, cap=int(cap) if cap is not None else -(-b.numerator // b.denominator))


def _as_fraction(value: Rate) -> Fraction:
    # float values go through their shortest decimal repr so that e.g.
    # 0.1 means exactly one tenth in comparisons
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


class _PlannedEntry:
    """Planner-side record of one admitted request."""

    __slots__ = ("mass_abs", "rem_abs", "overdue")

    def __init__(self, mass_abs: int, rem_abs: int) -> None:
        self.mass_abs = mass_abs
        self.rem_abs = rem_abs
        self.overdue = False


class AdmissionPlanner:
    """Incremental feasibility oracle for projection-based admission.

    Maintains base(d), the projected end-of-slot usage d slots ahead of
    the current slot for the active set plus tentatively admitted
    candidates, and the running maximum F(x) = max_{d<=x} (base(d) + d).
    A candidate with prompt length l and assumed output length o would
    add l + d at offset d <= o, so it fits iff F(o) + l <= kv_capacity.
    Admitting a candidate only ever tightens the constraint, so a
    rejection stays valid for the rest of the slot.

    Bookkeeping is in absolute coordinates: an entry admitted at slot s
    with assumed length x is a point mass at rem_abs = s + x with
    mass_abs = l - s, so both aging (every generated count up by one per
    slot) and scheduled expiry are free as the clock advances. Entries are
    binned by rem_abs, and per slot the trajectory base(d) + d over
    d = 1..D is densified once into a vector so a feasibility check is one
    lookup and an admission is one vectorized range add. An entry whose
    assumed window ran out while it is still resident (an optimistic
    assumption outgrown by reality) moves to an "overdue" aggregate that
    counts as finishing one slot ahead, matching a rolling
    max(assumed, generated + 1) estimate.
    """

    # beyond this depth the trajectory is evaluated analytically per query
    # instead of being densified; rare long assumption windows stay cheap
    DENSE_CAP = 96

    def __init__(
        self,
        entries: Iterable[Tuple[int, int, int]] = (),
        kv_capacity: int = 0,
        clock: int = 0,
    ) -> None:
        self.kv_capacity = kv_capacity
        self._clock = clock
        # aligned, sorted by rem_abs
        self._keys: List[int] = []
        self._bmass: List[int] = []
        self._bcnt: List[int] = []
        self._reg: Dict[int, _PlannedEntry] = {}
        self._expiry: Dict[int, List[int]] = {}
        self._ov_mass = 0
        self._ov_cnt = 0
        # dense per-slot cache: _vec[d-1] = base(d) + d, _front = prefix max
        self._vec: Optional[List[int]] = None
        self._front: Optional[List[int]] = None
        self._maxx = 16  # deepest horizon requested so far; densify this far
        for l, g, o in entries:
            if o > g:
                self._add_bin(clock + (o - g), (l + g) - clock)

    def _add_bin(self, rem_abs: int, mass_abs: int) -> None:
        keys = self._keys
        j = bisect_left(keys, rem_abs)
        if j < len(keys) and keys[j] == rem_abs:
            self._bmass[j] += mass_abs
            self._bcnt[j] += 1
        else:
            keys.insert(j, rem_abs)
            self._bmass.insert(j, mass_abs)
            self._bcnt.insert(j, 1)
        self._vec = None

    def _sub_bin(self, rem_abs: int, mass_abs: int) -> None:
        j = bisect_left(self._keys, rem_abs)
        self._bmass[j] -= mass_abs
        self._bcnt[j] -= 1
        self._vec = None

    def advance(self, clock: int, completed: Iterable[int] = ()) -> None:
        """Move to a later slot and drop entries whose requests finished.

        Expired assumption windows migrate to the overdue aggregate; bins
        entirely in the past fall off at the next densify.
        """
        if clock > self._clock:
            self._vec = None  # the dense depth grid is anchored at the clock
        while self._clock < clock:
            self._clock += 1
            ids = self._expiry.pop(self._clock, None)
            if ids:
                t = self._clock
                for rid in ids:
                    e = self._reg.get(rid)
                    if e is not None and not e.overdue and e.rem_abs == t:
                        e.overdue = True
                        self._sub_bin(t, e.mass_abs)
                        self._ov_mass += e.mass_abs
                        self._ov_cnt += 1
        for rid in completed:
            self._discard(rid)
        if self._keys and self._keys[0] <= self._clock:
            self._vec = None

    def _discard(self, rid: int) -> None:
        e = self._reg.pop(rid, None)
        if e is None:
            return
        if e.overdue:
            self._ov_mass -= e.mass_abs
            self._ov_cnt -= 1
            self._vec = None
        elif e.rem_abs > self._clock:
            self._sub_bin(e.rem_abs, e.mass_abs)
        # else: it expired exactly on schedule and its bin is already stale

    def remove(self, rid: int) -> None:
        """Forget an evicted request's contribution."""
        if rid not in self._reg:
            raise KeyError(f"request {rid} is not tracked by the planner")
        self._discard(rid)

    def tracked(self, rid: int) -> bool:
        return rid in self._reg

    def entry(self, rid: int) -> _PlannedEntry:
        return self._reg[rid]

    def _densify(self, upto: int) -> None:
        t = self._clock
        keys = self._keys
        cut = bisect_right(keys, t)
        if cut:
            del keys[:cut]
            del self._bmass[:cut]
            del self._bcnt[:cut]
        if upto > self._maxx:
            self._maxx = upto
        depth = self._maxx
        if keys:
            # suffix aggregates: entries binned at rem >= t + d survive depth d
            nk = len(keys)
            sm = [0] * (nk + 1)
            sc = [0] * (nk + 1)
            bmass = self._bmass
            bcnt = self._bcnt
            for j in range(nk - 1, -1, -1):
                sm[j] = sm[j + 1] + bmass[j]
                sc[j] = sc[j + 1] + bcnt[j]
            vec = []
            append = vec.append
            j = 0
            k = t
            for d in range(1, depth + 1):
                k += 1
                while j < nk and keys[j] < k:
                    j += 1
                append(sm[j] + k * sc[j] + d)
        else:
            vec = list(range(1, depth + 1))
        if self._ov_cnt:
            vec[0] += self._ov_mass + (t + 1) * self._ov_cnt
        self._vec = vec
        self._front = list(accumulate(vec, max))

    def _ensure(self, upto: int) -> None:
        if upto > self.DENSE_CAP:
            upto = self.DENSE_CAP
        if self._vec is None or len(self._vec) < upto:
            self._densify(upto)

    def _front_at(self, x: int) -> int:
        """Running max of base(d) + d over d <= x, beyond the dense cache."""
        front = self._front
        n = len(front)
        if x <= n:
            return front[x - 1]
        t = self._clock
        keys = self._keys
        nk = len(keys)
        best = front[n - 1]
        # past the cache only bins later than t + n still hold entries, and
        # between bin boundaries the trajectory rises, so each segment peaks
        # at its right boundary (or at x, whichever comes first)
        j0 = bisect_right(keys, t + n)
        sm = 0
        sc = 0
        tails: List[Tuple[int, int, int]] = []
        for i in range(nk - 1, j0 - 1, -1):
            sm += self._bmass[i]
            sc += self._bcnt[i]
            tails.append((keys[i] - t, sm, sc))
        hit_x = False
        for d, m, c in reversed(tails):
            if d >= x:
                d = x
                hit_x = True
            v = m + (t + d) * c + d
            if v > best:
                best = v
            if hit_x:
                break
        if not hit_x and x > best:
            best = x  # bare depth term past the last bin
        return best

    def projection(self, horizon: int) -> List[int]:
        """base(1..horizon); matches kvflow.core.peak_projection exactly."""
        self._ensure(horizon)
        vec = self._vec
        n = len(vec)
        out = [vec[d] - (d + 1) for d in range(min(horizon, n))]
        if horizon > n:
            t = self._clock
            keys = self._keys
            bmass = self._bmass
            bcnt = self._bcnt
            nk = len(keys)
            for d in range(n + 1, horizon + 1):
                j = bisect_left(keys, t + d)
                mass = sum(bmass[j:]) + (t + d) * sum(bcnt[j:])
                out.append(mass)
        return out

    def feasible(self, prompt_len: int, assumed_len: int) -> bool:
        if assumed_len < 1:
            raise ValueError(f"assumed_len must be >= 1, got {assumed_len}")
        self._ensure(assumed_len)
        front = self._front
        if assumed_len <= len(front):
            return front[assumed_len - 1] + prompt_len <= self.kv_capacity
        return self._front_at(assumed_len) + prompt_len <= self.kv_capacity

    def admit(
        self,
        prompt_len: int,
        assumed_len: int,
        req_id: Optional[int] = None,
        exact: bool = True,
    ) -> None:
        t = self._clock
        rem_abs = t + assumed_len
        mass_abs = prompt_len - t
        keys = self._keys
        j = bisect_left(keys, rem_abs)
        if j < len(keys) and keys[j] == rem_abs:
            self._bmass[j] += mass_abs
            self._bcnt[j] += 1
        else:
            keys.insert(j, rem_abs)
            self._bmass.insert(j, mass_abs)
            self._bcnt.insert(j, 1)
        if req_id is not None:
            self._reg[req_id] = _PlannedEntry(mass_abs, rem_abs)
            if not exact:
                self._expiry.setdefault(rem_abs, []).append(req_id)
        vec = self._vec
        if vec is not None:
            # in-place range add: the candidate holds l + d at depth d <= x
            front = self._front
            n = len(vec)
            rng = assumed_len if assumed_len < n else n
            run = 0
            for d in range(rng):
                v = vec[d] + prompt_len + d + 1
                vec[d] = v
                if v > run:
                    run = v
                front[d] = run
            # past the range the values are unchanged, so the prefix max
            # only needs lifting until the old front catches up
            for d in range(rng, n):
                if front[d] >= run:
                    break
                front[d] = run

    def max_admissible(self, prompt_len: int, assumed_len: int, limit: int) -> int:
        """Largest count of identical candidates that fit, capped at limit.

        Equivalent to admitting (prompt_len, assumed_len) copies one at a
        time while feasible: at depth d each copy adds prompt_len + d, so
        the d-th constraint caps the count at
        1 + (kv_capacity - prompt_len - base(d) - d) // (prompt_len + d),
        and the binding depth is the minimum over d <= assumed_len.
        """
        if assumed_len < 1:
            raise ValueError(f"assumed_len must be >= 1, got {assumed_len}")
        if limit <= 0:
            return 0
        self._ensure(assumed_len)
        M = self.kv_capacity
        l = prompt_len
        vec = self._vec
        n = len(vec)
        rng = assumed_len if assumed_len < n else n
        best = limit
        for i in range(rng):
            room = M - l - vec[i]
            if room < 0:
                return 0
            cap = 1 + room // (l + i + 1)
            if cap < best:
                best = cap
        if assumed_len > n:
            # depths past the dense cache: within a bin segment the value
            # rises and the divisor grows, so the binding point of each
            # segment is its right boundary
            t = self._clock
            keys = self._keys
            nk = len(keys)
            j0 = bisect_right(keys, t + n)
            sm = 0
            sc = 0
            tails: List[Tuple[int, int, int]] = []
            for i in range(nk - 1, j0 - 1, -1):
                sm += self._bmass[i]
                sc += self._bcnt[i]
                tails.append((keys[i] - t, sm, sc))
            hit_x = False
            for d, m, c in reversed(tails):
                if d >= assumed_len:
                    d = assumed_len
                    hit_x = True
                room = M - l - (m + (t + d) * c + d)
                if room < 0:
                    return 0
                cap = 1 + room // (l + d)
                if cap < best:
                    best = cap
                if hit_x:
                    break
            if not hit_x:
                d = assumed_len
                room = M - l - d
                if room < 0:
                    return 0
                cap = 1 + room // (l + d)
                if cap < best:
                    best = cap
        return best

    def admit_many(
        self,
        count: int,
        prompt_len: int,
        assumed_len: int,
        req_ids: Optional[Iterable[int]] = None,
        exact: bool = True,
    ) -> None:
        """Admit count identical candidates in one pass."""
        if count <= 0:
            return
        t = self._clock
        rem_abs = t + assumed_len
        mass_abs = prompt_len - t
        keys = self._keys
        j = bisect_left(keys, rem_abs)
        if j < len(keys) and keys[j] == rem_abs:
            self._bmass[j] += mass_abs * count
            self._bcnt[j] += count
        else:
            keys.insert(j, rem_abs)
            self._bmass.insert(j, mass_abs * count)
            self._bcnt.insert(j, count)
        if req_ids is not None:
            reg = self._reg
            for rid in req_ids:
                reg[rid] = _PlannedEntry(mass_abs, rem_abs)
                if not exact:
                    self._expiry.setdefault(rem_abs, []).append(rid)
        vec = self._vec
        if vec is not None:
            front = self._front
            n = len(vec)
            rng = assumed_len if assumed_len < n else n
            add0 = count * (prompt_len + 1)
            seg = [vec[d] + add0 + count * d for d in range(rng)]
            vec[:rng] = seg
            runs = list(accumulate(seg, max))
            front[:rng] = runs
            run = runs[-1]
            for d in range(rng, n):
                if front[d] >= run:
                    break
                front[d] = run

    def bootstrap(
        self,
        rid: Optional[int],
        prompt_len: int,
        generated: int,
        assumed_len: int,
        exact: bool = True,
    ) -> None:
        """Register an already-active request (assumed_len > generated)."""
        if assumed_len <= generated:
            return
        t = self._clock
        rem_abs = t + (assumed_len - generated)
        mass_abs = (prompt_len + generated) - t
        self._add_bin(rem_abs, mass_abs)
        if rid is not None:
            self._reg[rid] = _PlannedEntry(mass_abs, rem_abs)
            if not exact:
                self._expiry.setdefault(rem_abs, []).append(rid)


class _FifoGroup:
    """FIFO of view records ordered by (arrival_slot, id), O(1) amortized pops."""

    __slots__ = ("_items", "_head")

    def __init__(self) -> None:
        self._items: List[WaitingView] = []
        self._head = 0

    def __len__(self) -> int:
        return len(self._items) - self._head

    def push(self, wv: WaitingView) -> None:
        items = self._items
        if len(items) > self._head and (wv.arrival_slot, wv.id) < (
            items[-1].arrival_slot,
            items[-1].id,
        ):
            # re-entry after an eviction lands back at its arrival position
            insort(
                items,
                wv,
                lo=self._head,
                key=lambda e: (e.arrival_slot, e.id),
            )
        else:
            items.append(wv)

    def head(self) -> WaitingView:
        return self._items[self._head]

    def popleft(self) -> WaitingView:
        wv = self._items[self._head]
        self._head += 1
        if self._head > 64 and self._head * 2 > len(self._items):
            del self._items[: self._head]
            self._head = 0
        return wv

    def count_before(self, arrival_slot: int, req_id: int) -> int:
        """How many queued records order strictly before (arrival_slot, id)."""
        return (
            bisect_left(
                self._items,
                (arrival_slot, req_id),
                lo=self._head,
                key=lambda e: (e.arrival_slot, e.id),
            )
            - self._head
        )

    def pop_many(self, count: int) -> List[int]:
        """Pop the first count records, returning their ids in FIFO order."""
        h = self._head
        ids = [wv.id for wv in self._items[h : h + count]]
        self._head = h + count
        if self._head > 64 and self._head * 2 > len(self._items):
            del self._items[: self._head]
            self._head = 0
        return ids


class Policy:
    """Base policy: decide() activations, evict() on overflow.

    The default eviction undoes the most recent activations first (within
    a slot, the reverse of the activation order) and stops as soon as the
    required release is covered: the minimal last-in-first-out prefix.
    """

    name = "policy"
    requires_known_outputs = False
    requires_classes = False

    def reset(self, seed_seq: Optional[np.random.SeedSequence] = None) -> None:
        """Drop internal state before a run; seed_seq feeds any randomness."""

    def decide(self, view: PolicyView) -> ActivationDecision:
        raise NotImplementedError

    def evict(self, view: PolicyView, required_release: int) -> EvictionDecision:
        ids: List[int] = []
        freed = 0
        for av in view.iter_active_reversed():
            ids.append(av.id)
            freed += av.prompt_len + av.generated + 1
            if freed >= required_release:
                break
        return EvictionDecision(ids)


class PerClassFlowControl(Policy):
    """Activate up to a fixed integer budget per class per slot, FIFO within class.

    Admission never looks at the cache: when every class budget b_k
    satisfies sum_k b_k * workload_tokens(l_k, o_k) <= kv_capacity, the
    usage stays under that sum and no eviction can ever trigger.
    """

    name = "flow_per_class"
    requires_known_outputs = True
    requires_classes = True

    def __init__(self, budgets: Sequence[int]) -> None:
        budgets = tuple(int(b) for b in budgets)
        if not budgets or any(b < 0 for b in budgets):
            raise ValueError(f"per-class budgets must be nonnegative ints, got {budgets}")
        self.budgets = budgets
        self._queues: List[_FifoGroup] = [_FifoGroup() for _ in budgets]

    def reset(self, seed_seq=None) -> None:
        self._queues = [_FifoGroup() for _ in self.budgets]

    def decide(self, view: PolicyView) -> ActivationDecision:
        for wv in view.take_additions():
            k = wv.class_id
            if k is None or not 0 <= k < len(self.budgets):
                raise EngineError(f"request {wv.id} has unknown class id {k!r}")
            self._queues[k].push(wv)
        acts: List[int] = []
        for k, budget in enumerate(self.budgets):
            q = self._queues[k]
            for _ in range(min(budget, len(q))):
                acts.append(q.popleft().id)
        return ActivationDecision(acts)


class ScalarFlowControl(Policy):
    """Activate a random per-slot number of requests, FIFO across classes.

    Each slot draws B_t = floor(b) + Bernoulli(frac(b)), so E[B_t] = b and
    B_t never exceeds cap. Admission ignores lengths entirely; overflows
    are repaired by the inherited last-in-first-out eviction.
    """

    name = "flow_scalar"

    def __init__(self, budget: Rate, cap: Optional[int] = None) -> None:
        b = _as_fraction(budget)
        if b <= 0:
            raise ValueError(f"budget must be positive, got {budget}")
        self.budget = b
        self._floor = b.numerator // b.denominator
        self._frac = b - self._floor
        ceil_b = -(-b.numerator // b.denominator)
        self.cap = ceil_b if cap is None else int(cap)
        if self.cap < ceil_b:
            raise ValueError(
                f"cap {self.cap} is below ceil(budget) = {ceil_b}; the draw could exceed it"
            )
        self._rng: Optional[np.random.Generator] = None

    def reset(self, seed_seq=None) -> None:
        if self._frac > 0:
            if seed_seq is None:
                seed_seq = np.random.SeedSequence(0)
            self._rng = np.random.Generator(np.random.PCG64(seed_seq))
        else:
            self._rng = None

    def decide(self, view: PolicyView) -> ActivationDecision:
        b_t = self._floor
        if self._frac > 0:
            if self._rng is None:
                self.reset()
            if self._rng.random() < float(self._frac):
                b_t += 1
        acts: List[int] = []
        if b_t:
            for wv in view.iter_waiting():
                acts.append(wv.id)
                if len(acts) == b_t:
                    break
        return ActivationDecision(acts, budget=b_t)


class AlphaProtection(Policy):
    """Greedy admission below a protected headroom; evict everything on overflow.

    Admits head-of-line while current usage plus the initial footprints
    (l + 1 each) of everything admitted this slot stays within
    (1 - alpha) * kv_capacity, stopping at the first request that does not
    fit. An overflow evicts the entire active set.
    """

    name = "alpha_protection"

    def __init__(self, alpha: Union[float, str, Fraction]) -> None:
        a = _as_fraction(alpha)
        if not 0 <= a < 1:
            raise ValueError(f"alpha must be in [0, 1), got {alpha}")
        self.alpha = a

    def decide(self, view: PolicyView) -> ActivationDecision:
        # integer threshold: total <= (1 - alpha) * M iff total <= floor(...)
        limit = ((1 - self.alpha) * view.kv_capacity).__floor__()
        total = view.usage
        acts: List[int] = []
        for wv in view.iter_waiting():
            if total + wv.prompt_len + 1 <= limit:
                acts.append(wv.id)
                total += wv.prompt_len + 1
            else:
                break
        return ActivationDecision(acts)

    def evict(self, view: PolicyView, required_release: int) -> EvictionDecision:
        return EvictionDecision(view.active_ids())


class MemoryConstrained(Policy):
    """Admit FIFO while the full-lifetime projection provably fits.

    Each candidate is checked against the exact footprint trajectory of
    the active set plus everything admitted earlier this slot; the scan
    stops at the first rejection. With hidden outputs every length is
    treated as assume_max_output, the longest possible value, which keeps
    the projection an upper bound and the policy overflow-free.
    """

    name = "mc"

    def __init__(self, assume_max_output: Optional[int] = None) -> None:
        if assume_max_output is not None and assume_max_output < 1:
            raise ValueError(f"assume_max_output must be >= 1, got {assume_max_output}")
        self.assume_max_output = assume_max_output
        self._planner_state: Optional[AdmissionPlanner] = None

    def reset(self, seed_seq=None) -> None:
        self._planner_state = None

    def _assumed(self, decode_len: Optional[int], generated: int = 0) -> int:
        if decode_len is not None:
            return decode_len
        if self.assume_max_output is None:
            raise PolicyApplicabilityError(
                f"policy {self.name} needs assume_max_output when output lengths are hidden"
            )
        return max(self.assume_max_output, generated + 1)

    def _sync_planner(self, view: PolicyView) -> AdmissionPlanner:
        """Carry one planner across slots instead of rebuilding from scratch.

        The first call seeds it from the visible active set; afterwards it
        is kept aligned through this policy's own admissions and evictions
        plus the engine's completion feed.
        """
        planner = self._planner_state
        if planner is None or planner.kv_capacity != view.kv_capacity:
            planner = AdmissionPlanner((), view.kv_capacity, clock=view.clock)
            for av in view.iter_active():
                planner.bootstrap(
                    av.id,
                    av.prompt_len,
                    av.generated,
                    self._assumed(av.decode_len, av.generated),
                    exact=av.decode_len is not None,
                )
            view.take_completions()
            self._planner_state = planner
        else:
            planner.advance(view.clock, view.take_completions())
        return planner

    def decide(self, view: PolicyView) -> ActivationDecision:
        planner = self._sync_planner(view)
        if view.waiting_len == 0:
            return ActivationDecision([])
        acts: List[int] = []
        for wv in view.iter_waiting():
            assumed = self._assumed(wv.decode_len)
            if planner.feasible(wv.prompt_len, assumed):
                planner.admit(
                    wv.prompt_len, assumed, req_id=wv.id, exact=wv.decode_len is not None
                )
                acts.append(wv.id)
            else:
                break
        return ActivationDecision(acts)

    def evict(self, view: PolicyView, required_release: int) -> EvictionDecision:
        decision = super().evict(view, required_release)
        planner = self._planner_state
        if planner is not None:
            for rid in decision.to_evict:
                if planner.tracked(rid):
                    planner.remove(rid)
        return decision


class ShortestFirstMemoryConstrained(MemoryConstrained):
    """Memory-constrained admission in ascending output-length order.

    Scans candidates shortest decode first (ties by arrival slot, then
    id) and may skip an infeasible candidate and keep going. Requests
    with equal (decode_len, prompt_len) share feasibility within a slot,
    so the scan walks one head per group instead of the whole queue.
    """

    name = "mc_sf"
    requires_known_outputs = True

    def __init__(self) -> None:
        super().__init__(assume_max_output=None)
        self._groups: Dict[Tuple[int, int], _FifoGroup] = {}

    def reset(self, seed_seq=None) -> None:
        self._groups = {}
        self._planner_state = None

    def decide(self, view: PolicyView) -> ActivationDecision:
        planner = self._sync_planner(view)
        for wv in view.take_additions():
            if wv.decode_len is None:
                raise PolicyApplicabilityError(
                    "shortest-first admission needs visible output lengths"
                )
            key = (wv.decode_len, wv.prompt_len)
            group = self._groups.get(key)
            if group is None:
                group = self._groups[key] = _FifoGroup()
            group.push(wv)
        heap = []
        for key, group in self._groups.items():
            if len(group):
                head = group.head()
                heap.append((key[0], head.arrival_slot, head.id, key))
        if not heap:
            return ActivationDecision([])
        heapify(heap)
        acts: List[int] = []
        while heap:
            _, _, _, key = heappop(heap)
            group = self._groups[key]
            decode_len, prompt_len = key
            # admit this group's FIFO prefix in bulk, up to the point where
            # another group with the same decode length is due to interleave
            limit = len(group)
            if heap and heap[0][0] == decode_len:
                limit = group.count_before(heap[0][1], heap[0][2])
            take = planner.max_admissible(prompt_len, decode_len, limit)
            if take == 0:
                # every waiting request with this signature is equally
                # infeasible for the rest of the slot: skip the group
                continue
            ids = group.pop_many(take)
            planner.admit_many(take, prompt_len, decode_len, req_ids=ids, exact=True)
            acts.extend(ids)
            if take < limit:
                continue  # the group's next member no longer fits: skip it
            if len(group):
                head = group.head()
                heappush(heap, (decode_len, head.arrival_slot, head.id, key))
        return ActivationDecision(acts)


class AdaptivePrediction(Policy):
    """Optimistic admission under per-request output-length predictions.

    Every request starts with the shortest plausible prediction
    (min_output) and is admitted FIFO whenever the projection under the
    current predictions fits, skipping past infeasible candidates. On
    overflow the policy evicts in ascending prediction order (most recent
    first among equals) and doubles the evicted request's prediction, or
    raises it past the observed progress, whichever is larger; predictions
    persist across re-admissions. Never reads true decode lengths.
    """

    name = "amin"

    def __init__(self, min_output: int = 1) -> None:
        if min_output < 1:
            raise ValueError(f"min_output must be >= 1, got {min_output}")
        self.min_output = min_output
        self._pred: Dict[int, int] = {}
        self._groups: Dict[Tuple[int, int], _FifoGroup] = {}
        self._planner_state: Optional[AdmissionPlanner] = None
        # per admission episode: id -> (sequence number, prompt_len)
        self._meta: Dict[int, Tuple[int, int]] = {}
        self._evict_heap: List[Tuple[int, int, int, int]] = []
        self._seq = 0

    def reset(self, seed_seq=None) -> None:
        self._pred = {}
        self._groups = {}
        self._planner_state = None
        self._meta = {}
        self._evict_heap = []
        self._seq = 0

    def prediction(self, req_id: int) -> int:
        return self._pred.get(req_id, self.min_output)

    def _register(self, rid: int, prompt_len: int, predicted: int) -> None:
        self._seq += 1
        self._meta[rid] = (self._seq, prompt_len)
        heappush(self._evict_heap, (predicted, -self._seq, rid, self._seq))

    def _sync_planner(self, view: PolicyView) -> AdmissionPlanner:
        planner = self._planner_state
        if planner is None or planner.kv_capacity != view.kv_capacity:
            planner = AdmissionPlanner((), view.kv_capacity, clock=view.clock)
            for av in view.iter_active():
                predicted = self.prediction(av.id)
                eff = max(predicted, av.generated + 1)
                planner.bootstrap(av.id, av.prompt_len, av.generated, eff, exact=False)
                self._register(av.id, av.prompt_len, predicted)
            view.take_completions()
            self._planner_state = planner
        else:
            done = view.take_completions()
            planner.advance(view.clock, done)
            for rid in done:
                self._meta.pop(rid, None)
                self._pred.pop(rid, None)
        return planner

    def decide(self, view: PolicyView) -> ActivationDecision:
        planner = self._sync_planner(view)
        for wv in view.take_additions():
            key = (wv.prompt_len, self.prediction(wv.id))
            group = self._groups.get(key)
            if group is None:
                group = self._groups[key] = _FifoGroup()
            group.push(wv)
        heap = []
        for key, group in self._groups.items():
            if len(group):
                head = group.head()
                heap.append((head.arrival_slot, head.id, key))
        if not heap:
            return ActivationDecision([])
        heapify(heap)
        acts: List[int] = []
        while heap:
            _, _, key = heappop(heap)
            group = self._groups[key]
            prompt_len, predicted = key
            # the group's next members stay ahead of every other candidate
            # until the best other head interleaves: admit that run in bulk
            limit = len(group)
            if heap:
                limit = group.count_before(heap[0][0], heap[0][1])
            take = planner.max_admissible(prompt_len, predicted, limit)
            if take == 0:
                continue  # head infeasible: skip the whole group this slot
            ids = group.pop_many(take)
            planner.admit_many(take, prompt_len, predicted, req_ids=ids, exact=False)
            for rid in ids:
                self._register(rid, prompt_len, predicted)
            acts.extend(ids)
            if take < limit:
                continue  # the next member no longer fits: skip the group
            if len(group):
                head = group.head()
                heappush(heap, (head.arrival_slot, head.id, key))
        return ActivationDecision(acts)

    def evict(self, view: PolicyView, required_release: int) -> EvictionDecision:
        planner = self._sync_planner(view)
        t = view.clock
        heap = self._evict_heap
        meta = self._meta
        ids: List[int] = []
        freed = 0
        while heap and freed < required_release:
            predicted, _, rid, seq = heappop(heap)
            rec = meta.get(rid)
            if rec is None or rec[0] != seq or not planner.tracked(rid):
                continue  # stale: evicted, completed, or re-admitted since
            entry = planner.entry(rid)
            generated = entry.mass_abs + t - rec[1]
            freed += entry.mass_abs + t + 1
            self._pred[rid] = max(2 * predicted, generated + 1)
            planner.remove(rid)
            del meta[rid]
            ids.append(rid)
        if len(heap) > 64 and len(heap) > 4 * len(meta):
            live = [item for item in heap if meta.get(item[2], (None,))[0] == item[3]]
            heapify(live)
            self._evict_heap = live
        return EvictionDecision(ids)


class FixedSchedule(Policy):
    """Replay a precomputed activation schedule: slot -> request ids."""

    name = "fixed_schedule"

    def __init__(self, schedule: Dict[int, Sequence[int]]) -> None:
        self.schedule = {int(t): list(ids) for t, ids in schedule.items()}

    def decide(self, view: PolicyView) -> ActivationDecision:
        return ActivationDecision(list(self.schedule.get(view.clock, [])))


POLICY_NAMES = (
    "flow_per_class",
    "flow_scalar",
    "alpha_protection",
    "mc",
    "mc_sf",
    "amin",
)


def make_policy(name: str, params: Optional[dict] = None) -> Policy:
    """Build a policy from its registry name and a parameter mapping."""
    params = dict(params or {})
    if name not in POLICY_NAMES:
        raise ValueError(f"unknown policy {name!r}; known: {', '.join(POLICY_NAMES)}")
    try:
        if name == "flow_per_class":
            policy: Policy = PerClassFlowControl(budgets=params.pop("budgets"))
        elif name == "flow_scalar":
            budget = params.pop("budget")
            if isinstance(budget, str):
                budget = Fraction(budget)
            policy = ScalarFlowControl(budget=budget, cap=params.pop("cap", None))
        elif name == "alpha_protection":
            policy = AlphaProtection(alpha=params.pop("alpha"))
        elif name == "mc":
            policy = MemoryConstrained(
                assume_max_output=params.pop("assume_max_output", None)
            )
        elif name == "mc_sf":
            policy = ShortestFirstMemoryConstrained()
        else:
            policy = AdaptivePrediction(min_output=params.pop("min_output", 1))
    except KeyError as exc:
        raise ValueError(f"policy {name!r} is missing parameter {exc.args[0]!r}") from None
    if params:
        raise ValueError(f"policy {name!r} got unexpected parameters {sorted(params)}")
    return policy
