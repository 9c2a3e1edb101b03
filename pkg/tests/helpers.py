"""Shared builders for the tests: golden fixtures and random planner instances."""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import numpy as np

from inferline.core import (
    Edge,
    HardwareCatalog,
    HardwareType,
    ModelProfile,
    PipelineConfig,
    PipelineSpec,
    StageConfig,
)
from inferline.workload import ArrivalTrace, generate_gamma_trace

GOLDEN = Path(__file__).parent / "golden"


def load_golden() -> list[dict]:
    with open(GOLDEN / "estimator_fixtures.json", encoding="utf-8") as fh:
        return json.load(fh)["fixtures"]


def build_fixture(fx: dict):
    """(spec, profiles, config, trace) for one hand-traced fixture."""
    spec = PipelineSpec(tuple(fx["stages"]), tuple(Edge(*e) for e in fx["edges"]))
    profiles = {
        s: ModelProfile.from_latencies(s, {(hw, int(b)): lat for hw, tab in per_hw.items() for b, lat in tab.items()})
        for s, per_hw in fx["latency"].items()
    }
    config = PipelineConfig(tuple(StageConfig(s, *fx["config"][s]) for s in spec.topo_order))
    trace = ArrivalTrace.from_times(fx["arrivals"], spec, np.asarray(fx["choices"], dtype=np.int64)
                                    .reshape(len(fx["arrivals"]), len(spec.branch_points)))
    return spec, profiles, config, trace


def event_rows(log: list[dict]) -> list[list]:
    """Engine log entries in the compact row form used by the golden file."""
    rows = []
    for e in log:
        kind = e["event"]
        row = [kind, e["t"], e["stage"]]
        if kind == "arrival":
            row.append(e["query"])
        elif kind == "replica_free":
            row.append(e["replica"])
        elif kind == "dispatch":
            row += [e["replica"], list(e["queries"]), e["until"]]
        elif kind == "completion":
            row += [e["replica"], list(e["queries"])]
        rows.append(row)
    return rows


# ---------------------------------------------------------------- random planner instances

HARDWARE = ("fast", "slow")
PRICES = {"fast": Fraction(7, 10), "slow": Fraction(1, 10)}
BATCHES = (1, 2, 4)
MAX_REPLICAS = 4


def small_catalog() -> HardwareCatalog:
    return HardwareCatalog([HardwareType("fast", PRICES["fast"], 0), HardwareType("slow", PRICES["slow"], 1)])


def random_instance(rng: np.random.Generator, seed: int, n_max: int = 400):
    """A 2-3 stage tree pipeline on two hardware types with batches {1,2,4}.

    Returns a dict with the spec, profiles, the raw latency tables, the
    trace and an SLO. Loads are drawn so some instances need several
    replicas and a few cannot be served within the replica ceiling.
    """
    S = int(rng.integers(2, 4))
    stages = [f"m{i}" for i in range(S)]
    edges, parent = [], {stages[0]: None}
    for i in range(1, S):
        p = stages[int(rng.integers(0, i))]
        prob = float(rng.choice([1.0, 1.0, 0.5]))
        edges.append(Edge(p, stages[i], prob, stages[i] if prob < 1 else ""))
        parent[stages[i]] = p
    spec = PipelineSpec(tuple(stages), tuple(edges))

    latency = {}
    for s in stages:
        alpha = round(float(rng.uniform(0.0, 0.004)), 6)
        beta = round(float(rng.uniform(0.001, 0.005)), 6)
        slow = round(float(rng.uniform(1.2, 4.0)), 3)
        serial = rng.random() < 0.3
        tab = {}
        for b in BATCHES:
            fast_lat = b * (alpha + beta) if serial else alpha + beta * b
            tab["fast", b] = fast_lat
        factor = 1.0 if serial and rng.random() < 0.5 else slow
        for b in BATCHES:
            tab["slow", b] = tab["fast", b] * factor
        latency[s] = tab
    profiles = {s: ModelProfile.from_latencies(s, latency[s]) for s in stages}

    lam = float(rng.uniform(0.3, 2.5)) * min(1.0 / latency[s]["fast", 1] for s in stages)
    n_target = int(rng.integers(100, n_max + 1))
    trace = generate_gamma_trace(lam, float(rng.choice([1.0, 2.0])), n_target / lam, seed, spec)
    path_fast = _longest(spec, {s: latency[s]["fast", 1] for s in stages})
    slo = path_fast * float(rng.uniform(0.9, 6.0))
    return {"spec": spec, "profiles": profiles, "latency": latency, "parent": parent, "trace": trace,
            "slo": slo, "lam": lam}


def _longest(spec: PipelineSpec, lat: dict) -> float:
    finish = {}
    for s in spec.topo_order:
        finish[s] = lat[s] + max((finish[e.src] for e in spec.parents(s)), default=0.0)
    return max(finish.values())


def oracle_for(inst):
    """An independent recurrence simulator for ``inst`` (tree pipelines only)."""
    from oracles import TreeOracle

    spec, trace = inst["spec"], inst["trace"]
    visited, _ = spec.visits(trace.choices_for(spec))
    visits = {s: visited[:, spec.stages.index(s)] for s in spec.stages}
    return TreeOracle(list(spec.topo_order), inst["parent"], visits, trace.arrivals, inst["latency"])


def as_oracle_config(config: PipelineConfig) -> dict:
    return {c.model_id: (c.hardware_id, c.max_batch_size, c.replicas) for c in config}
