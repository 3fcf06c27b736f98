"""Core memory accounting: lifetime token cost, usage, and projections."""

from __future__ import annotations

import random

import numpy as np
import pytest

from kvflow.core import (
    Request,
    RequestClass,
    SimState,
    peak_projection,
    usage,
    workload_tokens,
)


def brute_lifetime_tokens(prompt_len: int, decode_len: int) -> int:
    # Independent route: literally add the per-slot footprint l + j over
    # the request's decode positions.
    return sum(prompt_len + j for j in range(1, decode_len + 1))


def brute_projection(entries, horizon):
    # Independent route: advance each request slot by slot instead of using
    # the closed-form alive test.
    totals = [0] * horizon
    for prompt_len, generated, decode_len in entries:
        g = generated
        for d in range(horizon):
            g += 1
            if g > decode_len:
                break
            totals[d] += prompt_len + g
    return totals


def make_active_request(req_id, prompt_len, decode_len, activation_slot, clock):
    r = Request(
        id=req_id,
        prompt_len=prompt_len,
        decode_len=decode_len,
        arrival_slot=activation_slot,
    )
    r.activation_slot = activation_slot
    return r


class TestWorkloadTokens:
    def test_frozen_values(self):
        assert workload_tokens(10, 20) == 410
        assert workload_tokens(10, 40) == 1220
        assert workload_tokens(10, 60) == 2430
        assert workload_tokens(1, 1) == 2

    def test_matches_bruteforce_everywhere(self):
        # Exhaustive over the full supported grid; closed form must agree
        # with the literal sum at every point.
        ls = np.arange(1, 257, dtype=np.int64)
        os_ = np.arange(1, 257, dtype=np.int64)
        closed = ls[:, None] * os_[None, :] + (os_ + os_ * os_)[None, :] // 2
        # independent accumulation: sum_{j<=o} (l + j) = l*o + cumsum(j)
        cum_j = np.cumsum(os_)
        brute = ls[:, None] * os_[None, :] + cum_j[None, :]
        assert np.array_equal(closed, brute)
        for l, o in [(1, 1), (10, 20), (7, 256), (256, 1), (13, 13)]:
            assert workload_tokens(l, o) == brute_lifetime_tokens(l, o)
            assert workload_tokens(l, o) == closed[l - 1, o - 1]

    def test_always_integer_and_positive(self):
        rng = random.Random(7)
        for _ in range(200):
            l = rng.randint(1, 500)
            o = rng.randint(1, 500)
            w = workload_tokens(l, o)
            assert isinstance(w, int)
            assert w >= l + 1

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            workload_tokens(0, 5)
        with pytest.raises(ValueError):
            workload_tokens(5, 0)
        with pytest.raises(ValueError):
            workload_tokens(-1, -1)


class TestUsage:
    def test_single_request_end_of_activation_slot(self):
        # One active request (l=10, o=3) at the end of its activation slot
        # has generated one token, so it holds 11.
        state = SimState.fresh(kv_capacity=100, rng_seed=0)
        state.clock = 5
        r = make_active_request(1, 10, 3, activation_slot=5, clock=5)
        state.active[r.id] = r
        assert usage(state) == 11

    def test_empty_active_set(self):
        state = SimState.fresh(kv_capacity=100, rng_seed=0)
        state.clock = 3
        assert usage(state) == 0

    def test_permutation_invariance(self):
        rng = random.Random(123)
        for trial in range(25):
            state = SimState.fresh(kv_capacity=10**9, rng_seed=0)
            state.clock = 50
            reqs = []
            for i in range(rng.randint(1, 12)):
                act = rng.randint(30, 50)
                reqs.append(
                    make_active_request(i, rng.randint(1, 40), 60, act, 50)
                )
            for r in reqs:
                state.active[r.id] = r
            total = usage(state)
            state2 = SimState.fresh(kv_capacity=10**9, rng_seed=0)
            state2.clock = 50
            shuffled = reqs[:]
            rng.shuffle(shuffled)
            for r in shuffled:
                state2.active[r.id] = r
            assert usage(state2) == total
            # independent route: explicit sum of l + (clock - s + 1)
            assert total == sum(r.prompt_len + (50 - r.activation_slot + 1) for r in reqs)


class TestPeakProjection:
    def test_frozen_single(self):
        # (l=10, generated=1, o=3): one more decode slot at 12, completes at
        # 13, gone afterwards.
        assert peak_projection([(10, 1, 3)], 3) == [12, 13, 0]

    def test_frozen_pair(self):
        assert peak_projection([(5, 0, 2), (5, 1, 2)], 2) == [13, 7]

    def test_empty(self):
        assert peak_projection([], 4) == [0, 0, 0, 0]

    def test_matches_bruteforce_random(self):
        rng = random.Random(99)
        for trial in range(200):
            entries = []
            for _ in range(rng.randint(0, 8)):
                o = rng.randint(1, 30)
                g = rng.randint(0, o)
                entries.append((rng.randint(1, 50), g, o))
            horizon = rng.randint(1, 40)
            assert peak_projection(entries, horizon) == brute_projection(entries, horizon)

    def test_horizon_validation(self):
        with pytest.raises(ValueError):
            peak_projection([(5, 0, 2)], 0)


class TestRequestAndClass:
    def test_request_class_validation(self):
        RequestClass(prompt_len=10, decode_len=20, rate=1.5)
        with pytest.raises(ValueError):
            RequestClass(prompt_len=0, decode_len=20, rate=1.0)
        with pytest.raises(ValueError):
            RequestClass(prompt_len=10, decode_len=0, rate=1.0)
        with pytest.raises(ValueError):
            RequestClass(prompt_len=10, decode_len=20, rate=-0.1)

    def test_request_lifecycle_fields(self):
        r = Request(id=7, prompt_len=4, decode_len=9, arrival_slot=3)
        assert r.activation_slot is None
        assert r.completion_slot is None
        assert r.evictions == 0
        assert r.output_known
