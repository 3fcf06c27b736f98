"""Metrics tests: hand-computed reports, nearest-rank percentiles, the
event-log recomputation oracle, and the tail-slope stability verdict."""

import json
from fractions import Fraction

import numpy as np
import pytest

from kvflow.core import Request, RequestClass
from kvflow.engine import run
from kvflow.metrics import (
    CSV_FIELDS,
    MetricsReport,
    compute_metrics,
    least_squares_slope,
    nearest_rank,
    read_metrics_csv,
    recompute_from_events,
    stability_estimate,
    write_metrics_csv,
)
from kvflow.policies import FixedSchedule, make_policy
from kvflow.workload import WorkloadSpec, generate_arrivals


def req(rid, l, o, arrival, known=True, class_id=None):
    return Request(
        id=rid,
        prompt_len=l,
        decode_len=o,
        arrival_slot=arrival,
        class_id=class_id,
        output_known=known,
    )


def report_from(latencies=(), horizon=10, usage=None, unfinished=None, **overrides):
    """Hand-build a report the way compute_metrics would."""
    n = len(latencies)
    ordered = sorted(latencies)
    fields = dict(
        policy="test",
        seed=0,
        horizon=horizon,
        kv_capacity=100,
        arrivals=n,
        completed=n,
        unfinished=0,
        latency_sum=sum(ordered),
        p95_latency=ordered[nearest_rank(n) - 1] if n else None,
        retained_tokens=0,
        wasted_tokens=0,
        overflow_events=0,
        eviction_events=0,
        kv_util_mean=0.0,
        kv_util_max=0.0,
        kv_util_std=0.0,
        queue_growth_slope=0.0,
    )
    fields.update(overrides)
    return MetricsReport(**fields)


class TestNearestRank:
    def test_hundred_values(self):
        # ceil(0.95 * 100) = 95
        assert nearest_rank(100) == 95

    def test_exact_multiple(self):
        # 0.95 * 20 = 19 exactly; float ceil would give 20 here
        assert nearest_rank(20) == 19

    def test_rounds_up(self):
        assert nearest_rank(21) == 20  # ceil(19.95)

    def test_single_value(self):
        assert nearest_rank(1) == 1

    def test_small_counts(self):
        # with n < 20 the p95 rank is just the maximum
        for n in range(1, 20):
            assert nearest_rank(n) == n

    def test_other_percentile(self):
        assert nearest_rank(10, 50, 100) == 5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            nearest_rank(0)


class TestLeastSquaresSlope:
    def test_constant_series(self):
        assert least_squares_slope([7] * 100) == 0.0

    def test_identity_series(self):
        assert least_squares_slope(list(range(1, 101))) == pytest.approx(1.0)

    def test_affine_series(self):
        assert least_squares_slope([3 + 2 * t for t in range(50)]) == pytest.approx(2.0)

    def test_short_series(self):
        assert least_squares_slope([5]) == 0.0
        assert least_squares_slope([]) == 0.0


class TestHandComputedReport:
    def run_one(self):
        # one request (l=2, o=5) arriving slot 1, activated immediately,
        # completing slot 5, over a 10-slot horizon
        arrivals = [[req(1, 2, 5, 1)]] + [[] for _ in range(9)]
        result = run(arrivals, FixedSchedule({1: [1]}), kv_capacity=100, record_events=True)
        return result, compute_metrics(result)

    def test_latency(self):
        _, m = self.run_one()
        assert m.avg_latency == 5
        assert m.p95_latency == 5

    def test_throughputs(self):
        _, m = self.run_one()
        assert m.request_throughput == Fraction(1, 10)
        assert m.token_throughput == Fraction(5, 10)

    def test_exact_count_recovery(self):
        _, m = self.run_one()
        assert m.request_throughput * m.horizon == m.completed
        assert m.token_throughput * m.horizon == m.retained_tokens

    def test_utilization(self):
        # footprints 3,4,5,6,7 then 0 for five slots, over capacity 100
        _, m = self.run_one()
        u = np.array([3, 4, 5, 6, 7, 0, 0, 0, 0, 0]) / 100.0
        assert m.kv_util_mean == pytest.approx(u.mean())
        assert m.kv_util_max == pytest.approx(0.07)
        assert m.kv_util_std == pytest.approx(u.std())

    def test_queue_slope_mixed_series(self):
        # unfinished is 1 for slots 1..4 (request in flight), 0 after
        _, m = self.run_one()
        assert m.queue_growth_slope < 0


class TestZeroCompletions:
    def test_no_arrivals(self):
        result = run([[] for _ in range(5)], FixedSchedule({}), kv_capacity=10)
        m = compute_metrics(result)
        assert m.completed == 0
        assert m.avg_latency is None
        assert m.p95_latency is None
        assert m.request_throughput == 0
        assert m.token_throughput == 0

    def test_never_activated(self):
        arrivals = [[req(1, 5, 5, 1)], [], []]
        m = compute_metrics(run(arrivals, FixedSchedule({}), kv_capacity=10))
        assert m.completed == 0
        assert m.unfinished == 1
        assert m.request_throughput == 0


class TestPercentileFromRuns:
    def test_latencies_one_to_hundred(self):
        # 100 requests with o = 1..100, all activated at their arrival
        # slot 1..100 staggered so each finishes alone; easier: activate
        # request k at slot 1 with o=k is infeasible at once, so build a
        # synthetic report instead and check the order statistic.
        m = report_from(latencies=list(range(1, 101)))
        assert m.p95_latency == 95
        assert m.avg_latency == Fraction(5050, 100)

    def test_p95_at_least_min(self):
        m = report_from(latencies=[4, 9, 2, 7])
        assert m.p95_latency >= min([4, 9, 2, 7])


class TestSerialization:
    def make_reports(self):
        arrivals = [[req(1, 2, 3, 1), req(2, 4, 1, 1)], [], [], []]
        r1 = run(arrivals, FixedSchedule({1: [1], 2: [2]}), kv_capacity=50)
        spec = WorkloadSpec.synthetic(
            [RequestClass(3, 4, Fraction(1, 2))], horizon=30, seed=1
        )
        r2 = run(generate_arrivals(spec, seed=1), make_policy("mc"), kv_capacity=40)
        return [compute_metrics(r1), compute_metrics(r2)]

    def test_csv_round_trip(self, tmp_path):
        reports = self.make_reports()
        path = tmp_path / "metrics.csv"
        write_metrics_csv(reports, path)
        assert read_metrics_csv(path) == reports

    def test_csv_round_trip_zero_completions(self, tmp_path):
        m = report_from()
        path = tmp_path / "metrics.csv"
        write_metrics_csv([m], path)
        (back,) = read_metrics_csv(path)
        assert back == m
        assert back.p95_latency is None

    def test_json_is_loadable(self, tmp_path):
        reports = self.make_reports()
        path = tmp_path / "metrics.json"
        reports[0].write_json(path)
        doc = json.loads(path.read_text())
        assert doc["completed"] == reports[0].completed
        assert doc["kv_utilization"]["max"] == reports[0].kv_util_max

    def test_rejects_foreign_csv(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_metrics_csv(path)

    def test_rejects_short_row(self):
        with pytest.raises(ValueError):
            MetricsReport.from_csv_row(["x", "1"])


def overloaded_run(policy_name, params, seed=0, horizon=400):
    classes = [
        RequestClass(4, 3, Fraction(2)),
        RequestClass(2, 6, Fraction(2)),
    ]
    spec = WorkloadSpec.synthetic(classes, horizon=horizon, seed=seed)
    pol = make_policy(policy_name, params)
    return run(
        generate_arrivals(spec, seed=seed),
        pol,
        kv_capacity=60,
        seed=seed,
        record_events=True,
    )


class TestEventLogRecompute:
    # The recomputation shares no state with the engine's counters, so
    # agreement pins both sides.
    @pytest.mark.parametrize(
        "name,params",
        [
            ("flow_per_class", {"budgets": (1, 1)}),
            ("flow_scalar", {"budget": 2}),
            ("alpha_protection", {"alpha": 0.5}),
            ("mc", {}),
            ("mc_sf", {}),
            ("amin", {"min_output": 3}),
        ],
    )
    def test_matches_direct_metrics(self, name, params):
        for seed in (0, 1, 2):
            result = overloaded_run(name, params, seed=seed)
            direct = compute_metrics(result)
            replayed = recompute_from_events(
                result.events,
                kv_capacity=result.kv_capacity,
                horizon=result.horizon,
                policy=result.policy_name,
                seed=result.seed,
            )
            assert replayed == direct

    def test_token_accounting_bound(self):
        result = overloaded_run("flow_scalar", {"budget": 2})
        m = compute_metrics(result)
        # retained + wasted can undercount only by tokens still held by
        # requests left active at the end of the run
        assert m.retained_tokens + m.wasted_tokens <= result.generated_tokens
        slack = result.generated_tokens - m.retained_tokens - m.wasted_tokens
        if result.final_active == 0:
            assert slack == 0

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            recompute_from_events([(1, "bogus", 1, 0)], kv_capacity=10, horizon=2)

    def test_rejects_out_of_horizon_slot(self):
        with pytest.raises(ValueError):
            recompute_from_events([(3, "arrive", 1, 0)], kv_capacity=10, horizon=2)


class TestStabilityEstimate:
    def synthetic_result(self, waiting, horizon=None):
        waiting = np.asarray(waiting, dtype=np.int64)
        horizon = horizon or len(waiting)
        zeros = np.zeros(len(waiting), dtype=np.int64)
        empty = np.array([], dtype=np.int64)
        return type(
            "R",
            (),
            {
                "unfinished": lambda self_: waiting + zeros,
                "horizon": horizon,
            },
        )()

    def test_constant_is_stable(self):
        r = self.synthetic_result([5] * 2000)
        est = stability_estimate(r)
        assert est.slope == 0.0
        assert est.verdict == "stable"
        assert est.window == 1000

    def test_linear_growth_detected(self):
        r = self.synthetic_result(list(range(1, 2001)))
        est = stability_estimate(r)
        assert est.slope == pytest.approx(1.0)
        assert est.verdict == "growing"

    def test_early_burst_ignored(self):
        # growth confined to the first half does not trip the verdict
        series = list(range(1000)) + [999] * 1000
        est = stability_estimate(self.synthetic_result(series))
        assert est.verdict == "stable"

    def test_short_run_inconclusive(self):
        r = self.synthetic_result(list(range(500)))
        est = stability_estimate(r)
        assert est.verdict == "inconclusive"
        assert est.slope == pytest.approx(1.0)

    def test_threshold_respected(self):
        series = [t // 100 for t in range(2000)]  # slope 0.01
        est = stability_estimate(self.synthetic_result(series), threshold=0.02)
        assert est.verdict == "stable"
        est = stability_estimate(self.synthetic_result(series), threshold=0.005)
        assert est.verdict == "growing"

    def test_engine_run_stable_case(self):
        spec = WorkloadSpec.synthetic(
            [RequestClass(2, 2, Fraction(1, 4))], horizon=1500, seed=3
        )
        result = run(
            generate_arrivals(spec, seed=3), make_policy("mc"), kv_capacity=200
        )
        assert stability_estimate(result).verdict == "stable"


class TestCsvFieldOrder:
    def test_integer_columns_precede_floats(self):
        # exact reconstruction depends on the integer columns being present
        idx = {name: i for i, name in enumerate(CSV_FIELDS)}
        assert idx["latency_sum"] < idx["avg_latency"]
        assert idx["completed"] < idx["request_throughput"]
        assert idx["retained_tokens"] < idx["token_throughput"]
