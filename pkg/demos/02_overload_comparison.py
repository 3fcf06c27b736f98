"""Six policies under token overload.

Triples the arrival rate of the three-class mix so the offered token
load exceeds the KV capacity. No admission rule can keep up: the
unfinished count must grow at least linearly, at a rate lower-bounded
by the excess load divided by the largest per-request cost. The run
compares how the policies fail: completions, evictions, wasted decode
work, and the measured backlog slope.
"""

from fractions import Fraction

from kvflow import (
    RequestClass,
    WorkloadSpec,
    check_necessary_known,
    compute_metrics,
    explosion_threshold,
    generate_arrivals,
    make_policy,
    run,
)

M = 16492
CLASSES = [
    RequestClass(10, 20, Fraction(5)),
    RequestClass(10, 40, Fraction(5)),
    RequestClass(10, 60, Fraction(5)),
]
HORIZON = 8000

POLICIES = [
    ("flow_per_class", {"budgets": (4, 4, 4)}),
    ("flow_scalar", {"budget": 12}),
    ("alpha_protection", {"alpha": 0.6}),
    ("mc", {}),
    ("mc_sf", {}),
    ("amin", {"min_output": 20}),
]


def main() -> None:
    load = check_necessary_known(CLASSES, M)
    print(f"Offered load {float(load.offered_load):.0f} tokens/slot vs capacity {M}: "
          f"{load.verdict}")
    w_max = max(c.lifetime_tokens for c in CLASSES)
    floor = explosion_threshold(load.offered_load, M, w_max, safety=1.0)
    print(f"Backlog must grow at >= (load - M) / w_max = {floor:.3f} req/slot\n")

    spec = WorkloadSpec.synthetic(CLASSES, horizon=HORIZON)
    arrivals = generate_arrivals(spec, seed=0)

    print(f"{'policy':<16}{'completed':>10}{'unfinished':>11}{'evictions':>10}"
          f"{'wasted_tok':>11}{'max_usage':>10}{'slope':>8}")
    for name, params in POLICIES:
        result = run(arrivals, make_policy(name, params), M, seed=0)
        m = compute_metrics(result)
        print(f"{name:<16}{m.completed:>10}{m.unfinished:>11}"
              f"{result.eviction_count:>10}{result.wasted_tokens:>11}"
              f"{result.max_usage:>10}{m.queue_growth_slope:>8.2f}")

    print("\nEvery slope sits above the floor; the policies differ in how much")
    print("useful work they salvage while the queue explodes. Per-class flow")
    print("control and mc_sf keep completions high by favoring cheap requests;")
    print("alpha_protection collapses because each overflow evicts every")
    print("active request and the re-decoded tokens are wasted work.")


if __name__ == "__main__":
    main()
