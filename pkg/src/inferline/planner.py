"""Low-frequency planner: feasible initialization and greedy cost minimization.

Every candidate configuration is judged by replaying the planning trace
through the estimator; a candidate is feasible when its P99 meets the SLO.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from inferline.core import (
    FORMAT_VERSION,
    HardwareCatalog,
    ModelProfile,
    PipelineConfig,
    PipelineSpec,
    StageConfig,
    config_cost,
    service_time,
)
from inferline.errors import InfeasibleError, ProfileError
from inferline.estimator import Feasibility, feasible
from inferline.workload import ArrivalTrace

log = logging.getLogger(__name__)

INCREASE_BATCH = "IncreaseBatch"
REMOVE_REPLICA = "RemoveReplica"
DOWNGRADE_HW = "DowngradeHW"

# tie-break among equal-cost candidates
KIND_RANK = {REMOVE_REPLICA: 0, DOWNGRADE_HW: 1, INCREASE_BATCH: 2}

DEFAULT_MAX_REPLICAS = 64


@dataclass(frozen=True)
class PlanAction:
    kind: str
    target: str
    config: PipelineConfig
    cost: Fraction
    p99: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target": self.target, "cost_per_hour": float(self.cost), "p99": self.p99,
                "config": self.config.to_dict()["stages"]}


@dataclass
class PlanResult:
    config: PipelineConfig
    cost: Fraction
    p99: float
    iterations: int
    initial: PipelineConfig
    actions: list[PlanAction] = field(default_factory=list)
    simulations: int = 0

    def replay(self) -> PipelineConfig:
        """Final configuration recovered from the initial one and the action log."""
        cfg = self.initial
        for a in self.actions:
            changed = [s for s in cfg if a.config[s.model_id] != s]
            assert all(s.model_id == a.target for s in changed), "action touched a non-target stage"
            cfg = a.config
        return cfg

    def to_dict(self, catalog: HardwareCatalog | None = None) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "cost_per_hour": float(self.cost),
            "p99": self.p99,
            "iterations": self.iterations,
            "simulations": self.simulations,
            "initial": self.initial.to_dict()["stages"],
            "actions": [a.to_dict() for a in self.actions],
        }


class Planner:
    """Greedy planner bound to one planning problem; memoises feasibility per configuration."""

    def __init__(self, spec: PipelineSpec, profiles: Mapping[str, ModelProfile], catalog: HardwareCatalog,
                 trace: ArrivalTrace, slo: float, max_replicas: int = DEFAULT_MAX_REPLICAS):
        self.spec = spec
        self.profiles = profiles
        self.catalog = catalog
        self.trace = trace
        self.slo = slo
        self.max_replicas = max_replicas
        self._cache: dict[PipelineConfig, Feasibility] = {}
        for s in spec.stages:
            if s not in profiles:
                raise ProfileError(f"no profile for model {s!r}")

    # -- helpers ----------------------------------------------------------

    def check(self, config: PipelineConfig) -> Feasibility:
        hit = self._cache.get(config)
        if hit is None:
            hit = feasible(self.spec, config, self.profiles, self.trace, self.slo, early_exit=True)
            self._cache[config] = hit
        return hit

    @property
    def simulations(self) -> int:
        return len(self._cache)

    def cost(self, config: PipelineConfig) -> Fraction:
        return config_cost(config, self.catalog)

    def hardware_for(self, stage: str) -> list[str]:
        prof = self.profiles[stage]
        return [h for h in prof.hardware_ids if h in self.catalog and (h, 1) in prof.entries]

    def best_hardware(self, stage: str) -> str:
        hw = self.hardware_for(stage)
        if not hw:
            raise ProfileError(f"model {stage!r} has no batch-1 profile on any catalog hardware")
        return self.catalog.fastest(hw)

    def capacity(self, c: StageConfig) -> float:
        """Effective capacity replicas * mu / s; inf for a stage no query visits."""
        prof = self.profiles[c.model_id]
        if prof.scale_factor <= 0:
            return float("inf")
        return c.replicas * prof.throughput(c.hardware_id, c.max_batch_size) / prof.scale_factor

    def _key(self, cost: Fraction, kind: str, stage: str) -> tuple:
        return (cost, KIND_RANK[kind], self.spec.topo_index[stage], stage)

    # -- initialization ---------------------------------------------------

    def initialize(self) -> PipelineConfig:
        config = PipelineConfig(tuple(
            StageConfig(s, self.best_hardware(s), 1, 1) for s in self.spec.topo_order
        ))
        st = service_time(config, self.profiles, self.spec)
        if st > self.slo:
            raise InfeasibleError(
                f"service time {st:.6g} s exceeds the SLO {self.slo:.6g} s", service_time=st, slo=self.slo
            )
        while not self.check(config):
            grown = self._grow_bottleneck(config)
            if grown is None:
                raise InfeasibleError(
                    f"every stage reached the replica ceiling {self.max_replicas} without meeting the SLO",
                    service_time=st, slo=self.slo,
                )
            config = grown
        return config

    def _grow_bottleneck(self, config: PipelineConfig) -> PipelineConfig | None:
        """One more replica at the lowest-capacity stage below the replica ceiling.

        Once every stage is at the ceiling, the lowest-capacity stage whose
        batch can double without the service time exceeding the SLO doubles
        it instead.
        """
        visited = [c for c in config if self.profiles[c.model_id].scale_factor > 0]
        order = sorted(visited, key=lambda c: (self.capacity(c), self.spec.topo_index[c.model_id]))
        for c in order:
            if c.replicas < self.max_replicas:
                return config.with_stage(c.model_id, replicas=c.replicas + 1)
        for c in order:
            cand = self.increase_batch(config, c.model_id)
            if cand is not None and service_time(cand, self.profiles, self.spec) <= self.slo:
                return cand
        return None

    # -- single actions ---------------------------------------------------

    def remove_replica(self, config: PipelineConfig, stage: str) -> PipelineConfig | None:
        c = config[stage]
        if c.replicas <= 1:
            return None
        return config.with_stage(stage, replicas=c.replicas - 1)

    def increase_batch(self, config: PipelineConfig, stage: str) -> PipelineConfig | None:
        c = config[stage]
        nxt = c.max_batch_size * 2
        if (c.hardware_id, nxt) not in self.profiles[stage].entries:
            return None
        return config.with_stage(stage, max_batch_size=nxt)

    def cheaper_hardware(self, config: PipelineConfig, stage: str) -> str | None:
        return self.catalog.next_cheaper(config[stage].hardware_id, self.hardware_for(stage))

    def downgrade_hardware(self, config: PipelineConfig, stage: str) -> PipelineConfig | None:
        """Move ``stage`` to the next cheaper hardware with every other stage frozen.

        The stage is re-initialized at batch 1 with replicas added until
        feasible, then locally minimized over its own batch and replica
        actions. None when not applicable or when the result is not a
        cheaper feasible configuration.
        """
        hw = self.cheaper_hardware(config, stage)
        if hw is None:
            return None
        parent_cost = self.cost(config)
        cand = config.with_stage(stage, hardware_id=hw, max_batch_size=1, replicas=1)
        while not self.check(cand):
            k = cand[stage].replicas
            if k >= self.max_replicas:
                return None
            cand = cand.with_stage(stage, replicas=k + 1)
        cand, _ = self._minimize(cand, stages=(stage,), allow_downgrade=False)
        if self.cost(cand) < parent_cost and self.check(cand):
            return cand
        return None

    # -- greedy search ----------------------------------------------------

    def _round(self, config: PipelineConfig, stages, allow_downgrade: bool) -> PlanAction | None:
        """The action a single greedy round applies, or None at a fixed point."""
        cost = self.cost(config)
        pending = []
        for s in stages:
            c = config[s]
            removed = self.remove_replica(config, s)
            if removed is not None:
                pending.append((self._key(self.cost(removed), REMOVE_REPLICA, s), REMOVE_REPLICA, s, removed))
            if allow_downgrade:
                hw = self.cheaper_hardware(config, s)
                if hw is not None:
                    lower = cost - c.replicas * self.catalog.cost(c.hardware_id) + self.catalog.cost(hw)
                    pending.append((self._key(lower, DOWNGRADE_HW, s), DOWNGRADE_HW, s, None))
        pending.sort(key=lambda p: p[0])

        best = None
        for key, kind, s, cand in pending:
            if best is not None and key > best[0]:
                break
            if kind == DOWNGRADE_HW:
                cand = self.downgrade_hardware(config, s)
                if cand is None:
                    continue
                key = self._key(self.cost(cand), kind, s)
                if best is not None and key > best[0]:
                    continue
            f = self.check(cand)
            if f and self.cost(cand) < cost:
                best = (key, kind, s, cand, f)
        if best is not None:
            _, kind, s, cand, f = best
            return PlanAction(kind, s, cand, self.cost(cand), f.p99)

        # equal-cost batch growth only counts when it buys latency slack
        current = self.check(config)
        grown = None
        for s in stages:
            cand = self.increase_batch(config, s)
            if cand is None:
                continue
            f = self.check(cand)
            if f and f.p99 < current.p99 and (grown is None or f.p99 < grown[2].p99):
                grown = (s, cand, f)
        if grown is not None:
            s, cand, f = grown
            return PlanAction(INCREASE_BATCH, s, cand, self.cost(cand), f.p99)
        return None

    def _minimize(self, config: PipelineConfig, stages=None, allow_downgrade: bool = True):
        stages = tuple(self.spec.topo_order if stages is None else stages)
        actions: list[PlanAction] = []
        while True:
            action = self._round(config, stages, allow_downgrade)
            if action is None:
                return config, actions
            actions.append(action)
            config = action.config

    def minimize_cost(self) -> PlanResult:
        initial = self.initialize()
        config, actions = self._minimize(initial)
        for a in actions:
            log.debug("%s on %s -> cost %s, p99 %.6g", a.kind, a.target, a.cost, a.p99)
        f = self.check(config)
        return PlanResult(config, self.cost(config), f.p99, len(actions), initial, actions, self.simulations)


def initialize(spec: PipelineSpec, profiles: Mapping[str, ModelProfile], catalog: HardwareCatalog,
               trace: ArrivalTrace, slo: float, max_replicas: int = DEFAULT_MAX_REPLICAS) -> PipelineConfig:
    return Planner(spec, profiles, catalog, trace, slo, max_replicas).initialize()


def minimize_cost(spec: PipelineSpec, profiles: Mapping[str, ModelProfile], catalog: HardwareCatalog,
                  trace: ArrivalTrace, slo: float, max_replicas: int = DEFAULT_MAX_REPLICAS) -> PlanResult:
    return Planner(spec, profiles, catalog, trace, slo, max_replicas).minimize_cost()


def downgrade_hardware(stage: str, config: PipelineConfig, spec: PipelineSpec,
                       profiles: Mapping[str, ModelProfile], catalog: HardwareCatalog, trace: ArrivalTrace,
                       slo: float, max_replicas: int = DEFAULT_MAX_REPLICAS) -> PipelineConfig | None:
    return Planner(spec, profiles, catalog, trace, slo, max_replicas).downgrade_hardware(config, stage)
