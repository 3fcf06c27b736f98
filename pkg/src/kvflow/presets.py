"""Shipped experiment configurations.

Each preset is a plain config dict in the exact shape the command line
expects; the JSON files under configs/ are verbatim serializations of
these (a test keeps them from drifting). Rates are strings so they stay
exact through JSON.

The synthetic presets share one three-class mix (prompts of 10 tokens,
outputs of 20/40/60) against a cache of 16492 tokens. Per-class rates of
5/3 put the offered load at 16650, just above capacity, while admission
budgets of 4 per class cap the worst-case footprint at 16240, just
below it. Rates of 5 triple the load and force every policy to shed
work. The trace presets replay the bundled 1000-record sample at an
aggregate rate of 10 (load below capacity) or 50 (far above it).
"""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path

KV_CAPACITY = 16492

PRESET_NAMES = (
    "synthetic_known",
    "synthetic_unknown",
    "synthetic_overloaded",
    "trace_low",
    "trace_high",
)

_BUILTIN_TRACES = ("trace_1k",)


def builtin_trace_path(tag: str) -> Path:
    """Filesystem path of a bundled trace, by its short tag."""
    if tag not in _BUILTIN_TRACES:
        raise ValueError(f"unknown builtin trace {tag!r}; known: {', '.join(_BUILTIN_TRACES)}")
    return Path(str(resources.files("kvflow") / "data" / f"{tag}.jsonl"))


def resolve_trace_path(path: str) -> str:
    """Expand a builtin:<tag> reference; ordinary paths pass through."""
    if path.startswith("builtin:"):
        return str(builtin_trace_path(path[len("builtin:"):]))
    return path


def _classes(rate: str) -> list:
    return [
        {"prompt_len": 10, "decode_len": 20, "rate": rate},
        {"prompt_len": 10, "decode_len": 40, "rate": rate},
        {"prompt_len": 10, "decode_len": 60, "rate": rate},
    ]


def _emit(**overrides) -> dict:
    flags = {"metrics_json": True, "metrics_csv": True, "series_csv": False, "event_log": False}
    flags.update(overrides)
    return flags


# The six-policy roster for the saturated synthetic mix. alpha 0.6
# protects a little over a third of the cache; amin's floor of 20 equals
# the true minimum output so its doubling guesses start realistic; the
# scalar budget 12 matches the aggregate admission rate of the per-class
# budgets (4, 4, 4).
_SYNTH_POLICIES = [
    {"name": "flow_per_class", "params": {"budgets": [4, 4, 4]}},
    {"name": "flow_scalar", "params": {"budget": 12}},
    {"name": "alpha_protection", "params": {"alpha": 0.6}},
    {"name": "mc", "params": {}},
    {"name": "mc_sf", "params": {}},
    {"name": "amin", "params": {"min_output": 20}},
]

# Trace replays hide output lengths, which removes flow_per_class (no
# class structure) and forces mc to assume the worst case; 200 is the
# ceiling the bundled sample was clipped to. mc_sf stays on the roster
# so comparisons show it as inapplicable rather than silently absent.
_TRACE_POLICIES = [
    {"name": "flow_scalar", "params": {"budget": 12}},
    {"name": "alpha_protection", "params": {"alpha": 0.6}},
    {"name": "mc", "params": {"assume_max_output": 200}},
    {"name": "mc_sf", "params": {}},
    {"name": "amin", "params": {"min_output": 1}},
]

_PRESETS = {
    "synthetic_known": {
        "workload": {
            "kind": "synthetic",
            "horizon": 10000,
            "outputs_known": True,
            "classes": _classes("5/3"),
        },
        "kv_capacity": KV_CAPACITY,
        "policy": {"name": "flow_per_class", "params": {"budgets": [4, 4, 4]}},
        "seeds": [0],
        "outputs": "runs/synthetic_known",
        "emit": _emit(),
    },
    "synthetic_unknown": {
        "workload": {
            "kind": "synthetic",
            "horizon": 10000,
            "outputs_known": False,
            "classes": _classes("5/3"),
        },
        "kv_capacity": KV_CAPACITY,
        "policy": {"name": "flow_scalar", "params": {"budget": 12}},
        # budget-search reads this block; run/stability ignore it
        "search": {"objective": "avg_latency", "grid": [8, 10, 12, "25/2", 13]},
        "seeds": [0],
        "outputs": "runs/synthetic_unknown",
        "emit": _emit(),
    },
    "synthetic_overloaded": {
        "workload": {
            "kind": "synthetic",
            "horizon": 50000,
            "outputs_known": True,
            "classes": _classes("5"),
        },
        "kv_capacity": KV_CAPACITY,
        "policies": copy.deepcopy(_SYNTH_POLICIES),
        "seeds": [0],
        "outputs": "runs/synthetic_overloaded",
        "emit": _emit(),
    },
    "trace_low": {
        "workload": {
            "kind": "trace",
            "horizon": 400,
            "outputs_known": False,
            "trace_path": "builtin:trace_1k",
            "format": "jsonl",
            "rate": 10,
        },
        "kv_capacity": KV_CAPACITY,
        "policies": copy.deepcopy(_TRACE_POLICIES),
        "seeds": [0],
        "outputs": "runs/trace_low",
        "emit": _emit(),
    },
    "trace_high": {
        "workload": {
            "kind": "trace",
            "horizon": 400,
            "outputs_known": False,
            "trace_path": "builtin:trace_1k",
            "format": "jsonl",
            "rate": 50,
        },
        "kv_capacity": KV_CAPACITY,
        "policies": copy.deepcopy(_TRACE_POLICIES),
        "seeds": [0],
        "outputs": "runs/trace_high",
        "emit": _emit(),
    },
}


def preset(name: str) -> dict:
    """A fresh copy of a named preset config."""
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; known: {', '.join(PRESET_NAMES)}")
    return copy.deepcopy(_PRESETS[name])


def write_preset_files(directory) -> list:
    """Serialize every preset into <directory>/<name>.json; returns the paths."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in PRESET_NAMES:
        path = directory / f"{name}.json"
        path.write_text(json.dumps(preset(name), indent=2) + "\n", encoding="utf-8")
        paths.append(path)
    return paths
