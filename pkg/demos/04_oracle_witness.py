"""Hindsight-optimal schedules, and why the objective matters.

On instances small enough for exact search, the oracle enumerates every
activation schedule and returns the best one for a chosen objective. A
three-request instance with one long job shows the two natural
objectives disagreeing: the latency optimum serves the short jobs first
and lets the long one miss the horizon, while the token-throughput
optimum starts everything at once and pays for it in latency.
"""

from kvflow import OfflineInstance, solve
from kvflow.oracle import replay

# (prompt_len, decode_len, arrival_slot); ids are assigned 1..n in order
TRIPLES = [(1, 10, 1), (1, 2, 1), (1, 2, 1)]
M = 11
HORIZON = 10


def show(tag: str, objective: str) -> None:
    inst = OfflineInstance.build(TRIPLES, M, HORIZON, objective)
    sol = solve(inst)
    print(f"{tag} (objective {objective}):")
    print(f"  optimal value {sol.value} after {sol.nodes} search nodes")
    for rid in sorted(sol.schedule):
        slot = sol.schedule[rid]
        when = f"activates at slot {slot}" if slot is not None else "is never activated"
        print(f"    request {rid} {when}")
    # Replaying the schedule through the engine reproduces the value and
    # scores the same schedule under the other objective too.
    _, metrics = replay(inst, sol.schedule)
    print(f"  replay: avg latency {metrics.avg_latency}, "
          f"token throughput {metrics.token_throughput}")


def main() -> None:
    print(f"Instance: requests (l, o, arrival) = {TRIPLES}, M = {M}, "
          f"horizon = {HORIZON}")
    print(f"Footprints peak at l + o, so the long request alone needs "
          f"{1 + 10} of {M} tokens.\n")
    show("Latency optimum", "avg_latency")
    print()
    show("Token-throughput optimum", "token_throughput")
    print("\nNo single schedule wins both objectives on this instance, so")
    print("policy comparisons must name the objective they are judged by.")


if __name__ == "__main__":
    main()
