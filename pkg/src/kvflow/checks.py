"""Executable statistical checks tying the analyzers to simulated runs.

Each check gates on the static precondition it needs (budget sufficiency,
overload, or a positive load margin), returns "skipped" when the
precondition fails, and otherwise runs the simulator across fixed seeds
and verdicts "pass" or "fail". Seeds, horizons, and tolerances default to
values fixed here so a failure is reproducible from the logged seed, not
negotiable at call time.

The almost-sure growth rate is checked at finite horizon with a 0.8
safety factor on the theoretical slope; that is a finite-sample proxy,
not a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from kvflow.core import workload_tokens
from kvflow.engine import run as engine_run
from kvflow.metrics import compute_metrics
from kvflow.policies import make_policy
from kvflow.stability import (
    check_necessary_known,
    check_necessary_unknown,
    check_sufficient_known,
)
from kvflow.workload import WorkloadSpec, generate_arrivals

PASS = "pass"
FAIL = "fail"
SKIPPED = "skipped"

DEFAULT_SEEDS = tuple(range(20))
EXPLOSION_SEEDS = tuple(range(10))
EXPLOSION_SAFETY = 0.8
EXPLOSION_POLICIES = (
    ("flow_per_class", None),  # budgets filled in from the check arguments
    ("flow_scalar", {"budget": 12}),
    ("alpha_protection", {"alpha": 0.6}),
    ("mc", {}),
    ("mc_sf", {}),
    ("amin", {"min_output": 1}),
)


@dataclass(frozen=True)
class CheckSpec:
    """Fixed run plan for one statistical check."""

    claim: str
    seeds: Tuple[int, ...]
    horizon: int
    tolerance: float = 0.0


@dataclass
class CheckResult:
    """Outcome of one check: verdict plus the numbers behind it."""

    claim: str
    verdict: str
    reason: str
    seeds: Tuple[int, ...] = ()
    details: Dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    @property
    def skipped(self) -> bool:
        return self.verdict == SKIPPED

    def as_dict(self) -> dict:
        return {
            "claim": self.claim,
            "verdict": self.verdict,
            "reason": self.reason,
            "seeds": list(self.seeds),
            "details": dict(self.details),
        }


def _offered_load(spec: WorkloadSpec) -> Fraction:
    if spec.kind == "synthetic":
        return check_necessary_known(spec.classes, 1).offered_load
    return check_necessary_unknown(spec.length_distribution(), spec.total_rate(), 1).offered_load


def _runnable(name: str, params: dict, spec: WorkloadSpec) -> bool:
    policy = make_policy(name, params)
    if policy.requires_known_outputs and not spec.outputs_known:
        return False
    if policy.requires_classes and spec.classes is None:
        return False
    if name == "mc" and not spec.outputs_known and params.get("assume_max_output") is None:
        return False
    return True


def _max_workload(spec: WorkloadSpec) -> int:
    if spec.classes is not None:
        return max(c.lifetime_tokens for c in spec.classes)
    return max(workload_tokens(r.prompt_len, r.decode_len) for r in spec.records)


def explosion_threshold(
    offered_load: Fraction, capacity: int, max_workload: int, safety: float = EXPLOSION_SAFETY
) -> float:
    """Minimum unfinished-count growth rate demanded of an overloaded run.

    The excess arrival work per slot, divided by the largest per-request
    lifetime cost, lower-bounds how fast the backlog must grow; the
    safety factor absorbs finite-horizon noise. Linear in the excess, so
    doubling the overshoot doubles the threshold.
    """
    excess = offered_load - capacity
    if excess <= 0:
        raise ValueError(f"load {offered_load} does not exceed capacity {capacity}")
    return safety * float(Fraction(excess, max_workload))


def check_budgeted_no_overflow(
    spec: WorkloadSpec,
    budgets: Sequence[int],
    kv_capacity: int,
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> CheckResult:
    """Per-class budgets meeting the admission and memory conditions keep
    every run free of overflows and evictions, with peak usage bounded by
    the budgeted load."""
    claim = "budgeted admission never overflows"
    if spec.kind != "synthetic" or not spec.outputs_known:
        return CheckResult(claim, SKIPPED, "needs a synthetic workload with visible lengths")
    gate = check_sufficient_known(spec.classes, budgets, kv_capacity)
    if not gate.sufficient_holds:
        return CheckResult(
            claim,
            SKIPPED,
            "sufficiency precondition fails",
            details={"sufficiency": gate.as_dict()},
        )
    bound = gate.budgeted_load
    per_seed: List[dict] = []
    bad: List[int] = []
    for seed in seeds:
        res = engine_run(
            generate_arrivals(spec, seed),
            make_policy("flow_per_class", {"budgets": tuple(budgets)}),
            kv_capacity,
            seed=seed,
        )
        ok = res.overflow_slots == 0 and res.eviction_count == 0 and res.max_usage <= bound
        per_seed.append(
            {
                "seed": seed,
                "overflow_slots": res.overflow_slots,
                "evictions": res.eviction_count,
                "max_usage": res.max_usage,
            }
        )
        if not ok:
            bad.append(seed)
    verdict = PASS if not bad else FAIL
    reason = "clean in every run" if not bad else f"violations at seeds {bad}"
    return CheckResult(
        claim,
        verdict,
        reason,
        seeds=tuple(seeds),
        details={"usage_bound": bound, "runs": per_seed},
    )


def check_overload_explosion(
    spec: WorkloadSpec,
    kv_capacity: int,
    budgets: Optional[Sequence[int]] = None,
    policies: Optional[Sequence[Tuple[str, Optional[dict]]]] = None,
    seeds: Sequence[int] = EXPLOSION_SEEDS,
    safety: float = EXPLOSION_SAFETY,
) -> CheckResult:
    """When offered load exceeds capacity, the unfinished count grows at
    least linearly under every policy.

    Works for synthetic mixes and trace replays alike: the load is the
    (empirical) mean lifetime cost times the arrival rate.
    """
    claim = "overload grows the backlog linearly under every policy"
    load = _offered_load(spec)
    if load <= kv_capacity:
        return CheckResult(
            claim,
            SKIPPED,
            f"offered load {float(load):.1f} does not exceed capacity {kv_capacity}",
        )
    threshold = explosion_threshold(load, kv_capacity, _max_workload(spec), safety)
    roster = list(policies if policies is not None else EXPLOSION_POLICIES)
    slopes: List[dict] = []
    failures: List[str] = []
    for name, params in roster:
        if params is None:
            if budgets is None or spec.classes is None:
                continue
            params = {"budgets": tuple(budgets)}
        if not _runnable(name, params, spec):
            continue
        for seed in seeds:
            res = engine_run(
                generate_arrivals(spec, seed),
                make_policy(name, params),
                kv_capacity,
                seed=seed,
            )
            slope = compute_metrics(res).queue_growth_slope
            slopes.append({"policy": name, "seed": seed, "slope": slope})
            if slope < threshold:
                failures.append(f"{name}@{seed}: {slope:.3f}")
    verdict = PASS if not failures else FAIL
    reason = (
        f"all slopes >= {threshold:.3f} requests/slot"
        if not failures
        else f"below threshold {threshold:.3f}: {failures}"
    )
    return CheckResult(
        claim,
        verdict,
        reason,
        seeds=tuple(seeds),
        details={"offered_load": float(load), "threshold": threshold, "slopes": slopes},
    )


def check_overflow_rarity(
    spec: WorkloadSpec,
    budget,
    kv_capacity: int,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    cap: Optional[int] = None,
) -> CheckResult:
    """A scalar admission budget whose mean load leaves a positive margin
    below capacity produces no observed overflows, and the per-slot
    activation draw never exceeds its cap."""
    claim = "scalar admission with positive load margin never overflows in practice"
    b = Fraction(str(budget)) if not isinstance(budget, (int, Fraction)) else Fraction(budget)
    epsilon = 1 - b * spec.length_distribution().mean_workload() / kv_capacity
    if epsilon <= 0:
        return CheckResult(
            claim,
            SKIPPED,
            f"load margin epsilon = {float(epsilon):.4f} is not positive",
            details={"epsilon_exact": str(epsilon)},
        )
    draw_cap = cap if cap is not None else math.ceil(b)
    params = {"budget": budget} if cap is None else {"budget": budget, "cap": cap}
    observed = 0
    cap_breaches: List[int] = []
    per_seed: List[dict] = []
    for seed in seeds:
        res = engine_run(
            generate_arrivals(spec, seed),
            make_policy("flow_scalar", params),
            kv_capacity,
            seed=seed,
        )
        observed += res.overflow_slots
        if int(res.budgets.max()) > draw_cap:
            cap_breaches.append(seed)
        per_seed.append({"seed": seed, "overflow_slots": res.overflow_slots})
    verdict = PASS if observed == 0 and not cap_breaches else FAIL
    if verdict == PASS:
        reason = f"0 overflow slots across {len(list(seeds))} runs"
    elif cap_breaches:
        reason = f"activation draw exceeded {draw_cap} at seeds {cap_breaches}"
    else:
        reason = f"{observed} overflow slots observed"
    return CheckResult(
        claim,
        verdict,
        reason,
        seeds=tuple(seeds),
        details={
            "epsilon": float(epsilon),
            "epsilon_exact": str(epsilon),
            "draw_cap": draw_cap,
            "runs": per_seed,
        },
    )
