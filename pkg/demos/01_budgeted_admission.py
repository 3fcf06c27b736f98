"""Budgeted admission on a known three-class mix.

Walks the full loop: state the mix, check the static stability
conditions, pick per-class budgets that satisfy them, and confirm in
simulation that the run stays free of overflows with peak usage under
the budgeted bound.
"""

from fractions import Fraction

from kvflow import (
    RequestClass,
    WorkloadSpec,
    build_report,
    compute_metrics,
    generate_arrivals,
    make_policy,
    run,
    workload_tokens,
)

M = 16492
RATE = Fraction(5, 3)
CLASSES = [
    RequestClass(10, 20, RATE),
    RequestClass(10, 40, RATE),
    RequestClass(10, 60, RATE),
]


def main() -> None:
    print("KV capacity M =", M)
    print("\nPer-request lifetime token cost w(l, o) = l*o + (o + o^2)/2:")
    for c in CLASSES:
        print(f"  class (l={c.prompt_len}, o={c.decode_len}, rate={c.rate}): "
              f"w = {workload_tokens(c.prompt_len, c.decode_len)}")

    budgets = (4, 4, 4)
    report = build_report(M, classes=CLASSES, budgets=budgets)
    nec = report.necessary
    suf = report.sufficient
    print(f"\nOffered load = sum rate_k * w_k = {nec.offered_load} "
          f"({float(nec.offered_load):.1f} tokens/slot)")
    print("Necessary condition (load below M):",
          "fails" if nec.necessary_violated else "holds")
    print(f"\nBudgets b = {budgets}:")
    print(f"  admission condition (b_k > rate_k for all k): {suf.rate_condition}")
    print(f"  memory condition (sum b_k * w_k = {suf.budgeted_load} < {M}): "
          f"{suf.memory_condition}")

    # One budget unit more on the cheap class already breaks the memory bound
    too_big = build_report(M, classes=CLASSES, budgets=(5, 4, 4)).sufficient
    print(f"  contrast b = (5, 4, 4): budgeted load {too_big.budgeted_load}, "
          f"memory condition {too_big.memory_condition}")

    horizon = 5000
    spec = WorkloadSpec.synthetic(CLASSES, horizon=horizon)
    policy = make_policy("flow_per_class", {"budgets": budgets})
    result = run(generate_arrivals(spec, seed=0), policy, M, seed=0)
    metrics = compute_metrics(result)

    print(f"\nSimulated {horizon} slots (seed 0) under per-class flow control:")
    print(f"  arrivals {result.arrivals_total}, completed {metrics.completed}, "
          f"unfinished {metrics.unfinished}")
    print(f"  overflow slots {result.overflow_slots}, evictions {result.eviction_count}")
    print(f"  peak usage {result.max_usage} <= budgeted load {suf.budgeted_load}: "
          f"{result.max_usage <= suf.budgeted_load}")
    print(f"  mean KV utilization {metrics.kv_util_mean:.3f}, "
          f"backlog growth slope {metrics.queue_growth_slope:.4f} req/slot")


if __name__ == "__main__":
    main()
