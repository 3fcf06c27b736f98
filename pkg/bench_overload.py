"""Scratch benchmark: six policies on the overloaded preset, one seed."""

import time

from kvflow.core import RequestClass
from kvflow.engine import run
from kvflow.policies import make_policy
from kvflow.workload import WorkloadSpec, generate_arrivals

T = 50_000
M = 16_492
CLASSES = [
    RequestClass(10, 20, 5),
    RequestClass(10, 40, 5),
    RequestClass(10, 60, 5),
]

spec = WorkloadSpec.synthetic(CLASSES, horizon=T, outputs_known=True)

t0 = time.perf_counter()
arrivals = list(generate_arrivals(spec, seed=0))
t1 = time.perf_counter()
print(f"arrival gen: {t1 - t0:.2f}s  total={sum(len(s) for s in arrivals)}")

POLICIES = [
    ("flow_per_class", {"budgets": (4, 4, 4)}),
    ("flow_scalar", {"budget": 12}),
    ("alpha_protection", {"alpha": 0.6}),
    ("mc", {}),
    ("mc_sf", {}),
    ("amin", {"min_output": 20}),
]

for name, kw in POLICIES:
    pol = make_policy(name, kw)
    t0 = time.perf_counter()
    res = run(arrivals, pol, kv_capacity=M, seed=0)
    dt = time.perf_counter() - t0
    lat = res.latencies()
    print(
        f"{name:15s} {dt:6.2f}s  completed={res.completed_count:7d} "
        f"evict={res.eviction_count:8d} overflow={res.overflow_slots:6d} "
        f"max_usage={res.max_usage:6d} final_wait={res.final_waiting:7d}"
    )
