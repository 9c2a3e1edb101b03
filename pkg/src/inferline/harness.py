"""Live replay under a tuning policy, plus the coarse-grained baselines."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from inferline.core import (
    FORMAT_VERSION,
    HardwareCatalog,
    ModelProfile,
    PipelineConfig,
    PipelineSpec,
    StageConfig,
    service_time,
)
from inferline.errors import ConfigurationError, InfeasibleError, ValidationError
from inferline.estimator import ARRIVAL, EventEngine
from inferline.tuner import (
    ACTIVATION_DELAY,
    STABILIZATION_DELAY,
    Tuner,
    TunerDecision,
    TunerState,
    build_envelope,
    ceil_ratio,
)
from inferline.workload import ArrivalTrace, compute_stats

POLICIES = ("none", "inferline", "cg")
TICK = 1.0


@dataclass
class ClusterTimeline:
    """Provisioned (billed) and active (serving) replica counts per stage over time."""

    stages: tuple[str, ...]
    provisioned: dict[str, list[tuple[float, int]]] = field(default_factory=dict)
    active: dict[str, list[tuple[float, int]]] = field(default_factory=dict)

    @classmethod
    def start(cls, config: PipelineConfig, t0: float = 0.0) -> "ClusterTimeline":
        stages = tuple(s.model_id for s in config)
        prov = {s.model_id: [(t0, s.replicas)] for s in config}
        act = {s.model_id: [(t0, s.replicas)] for s in config}
        return cls(stages, prov, act)

    def count(self, stage: str, t: float, which: str = "provisioned") -> int:
        series = getattr(self, which)[stage]
        value = series[0][1]
        for when, k in series:
            if when <= t:
                value = k
            else:
                break
        return value

    def set(self, stage: str, t: float, k: int, which: str = "provisioned") -> None:
        if k < 1:
            raise ConfigurationError(f"replica count for {stage!r} would drop below 1")
        series = getattr(self, which)[stage]
        if series[-1][0] == t:
            series[-1] = (t, k)
        elif series[-1][0] < t:
            if series[-1][1] != k:
                series.append((t, k))
        else:
            # an activation scheduled in the future was overtaken by a later decision
            kept = [p for p in series if p[0] < t]
            series[:] = kept + [(t, k)]

    def cost(self, catalog: HardwareCatalog, config: PipelineConfig, end: float) -> float:
        """Dollars billed over [start, end]: integral of provisioned replicas times hourly price."""
        total = Fraction(0)
        for stage in self.stages:
            price = catalog.cost(config[stage].hardware_id)
            series = self.provisioned[stage]
            for (t0, k), nxt in zip(series, series[1:] + [(end, None)]):
                t1 = min(nxt[0], end)
                if t1 > t0:
                    total += price * k * Fraction(t1 - t0)
        return float(total / 3600)


@dataclass
class SimReport:
    policy: str
    latencies: np.ndarray
    arrivals: np.ndarray
    slo: float
    cost: float
    duration: float
    decisions: list[dict] = field(default_factory=list)
    timeline: ClusterTimeline | None = None

    @property
    def n(self) -> int:
        return len(self.latencies)

    @property
    def miss_rate(self) -> float:
        if not self.n:
            return 0.0
        return float(np.count_nonzero(self.latencies > self.slo)) / self.n

    def miss_rate_where(self, mask: np.ndarray) -> float:
        sel = self.latencies[mask]
        return float(np.count_nonzero(sel > self.slo)) / len(sel) if len(sel) else 0.0

    def miss_rate_excluding(self, intervals: Sequence[tuple[float, float]]) -> float:
        """Miss rate over queries whose arrival lies outside every ``[a, b)`` interval."""
        keep = np.ones(self.n, dtype=bool)
        for a, b in intervals:
            keep &= ~((self.arrivals >= a) & (self.arrivals < b))
        return self.miss_rate_where(keep)

    def scale_up_times(self) -> list[float]:
        return [d["time"] for d in self.decisions if d["trigger"] == "scale-up"]

    def percentile(self, pct: float) -> float:
        if not self.n:
            return 0.0
        v = np.sort(self.latencies)
        rank = max(1, math.ceil(pct / 100.0 * len(v) - 1e-12))
        return float(v[rank - 1])

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "policy": self.policy,
            "queries": self.n,
            "slo": self.slo,
            "miss_rate": self.miss_rate,
            "p50": self.percentile(50),
            "p99": self.percentile(99),
            "max": float(self.latencies.max()) if self.n else 0.0,
            "cost": self.cost,
            "duration": self.duration,
            "decisions": self.decisions,
            "timeline": {s: [[t, k] for t, k in self.timeline.provisioned[s]] for s in self.timeline.stages}
            if self.timeline is not None else {},
        }

    def queries_csv(self) -> str:
        return queries_csv(self.arrivals, self.latencies, self.slo)


def queries_csv(arrivals: np.ndarray, latencies: np.ndarray, slo: float) -> str:
    lines = ["query_id,arrival,latency,deadline_met"]
    for q, (a, lat) in enumerate(zip(np.asarray(arrivals).tolist(), np.asarray(latencies).tolist())):
        lines.append(f"{q},{a!r},{lat!r},{int(lat <= slo)}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Coarse-grained baseline
# --------------------------------------------------------------------------


@dataclass
class CGPlan:
    config: PipelineConfig
    batch_size: int
    unit_throughput: float
    units: int
    target_rate: float
    mode: str


def peak_rate(trace: ArrivalTrace, width: float) -> float:
    """Largest arrival count in any window of ``width`` seconds, as a rate."""
    env = build_envelope(trace, windows=[width])
    return env.counts[0] / width


def cg_plan(spec: PipelineSpec, profiles: Mapping[str, ModelProfile], catalog: HardwareCatalog,
            trace: ArrivalTrace, slo: float, mode: str) -> CGPlan:
    """The whole pipeline as one unit: fastest hardware, one uniform batch size, replicated together."""
    if mode not in ("mean", "peak"):
        raise ValidationError(f"cg mode must be 'mean' or 'peak', got {mode!r}")
    if len(trace) < 2:
        raise ValidationError("cg provisioning needs a trace with at least 2 queries")
    hw = {}
    for s in spec.stages:
        prof = profiles[s]
        candidates = [h for h in prof.hardware_ids if h in catalog]
        hw[s] = catalog.fastest(candidates)
    common = set.intersection(*(set(profiles[s].batch_sizes(hw[s])) for s in spec.stages))
    chosen = None
    for b in sorted(common):
        cfg = PipelineConfig(tuple(StageConfig(s, hw[s], b, 1) for s in spec.topo_order))
        if service_time(cfg, profiles, spec) <= slo:
            chosen = b
    if chosen is None:
        smallest = min(common) if common else 1
        cfg = PipelineConfig(tuple(StageConfig(s, hw[s], smallest, 1) for s in spec.topo_order))
        st = service_time(cfg, profiles, spec) if common else math.inf
        raise InfeasibleError(f"no uniform batch size meets the SLO {slo:.6g} s", service_time=st, slo=slo)
    unit = min(profiles[s].throughput(hw[s], chosen) / profiles[s].scale_factor
               for s in spec.stages if profiles[s].scale_factor > 0)
    target = compute_stats(trace).lam if mode == "mean" else peak_rate(trace, slo)
    units = max(1, ceil_ratio(target / unit))
    config = PipelineConfig(tuple(StageConfig(s, hw[s], chosen, units) for s in spec.topo_order))
    return CGPlan(config, chosen, unit, units, target, mode)


def cg_provision(spec: PipelineSpec, profiles: Mapping[str, ModelProfile], catalog: HardwareCatalog,
                 trace: ArrivalTrace, slo: float, mode: str) -> PipelineConfig:
    return cg_plan(spec, profiles, catalog, trace, slo, mode).config


class CoarseGrainedTuner:
    """Reactive whole-pipeline scaling from the mean rate of the last 30 s.

    Scales up when the rate exceeds the provisioned capacity, and down
    (after the stabilization delay) when it falls below 70% of it; the new
    unit count targets 85% utilization.
    """

    def __init__(self, stages: Sequence[str], unit_throughput: float, units: int, *, window: float = 30.0,
                 upper: float = 1.0, lower: float = 0.7, target: float = 0.85,
                 stabilization: float = STABILIZATION_DELAY, start: float = 0.0):
        self.stages = tuple(stages)
        self.unit = unit_throughput
        self.units = units
        self.window = window
        self.upper, self.lower, self.target = upper, lower, target
        self.stabilization = stabilization
        self.start = start
        self.last_change = -math.inf
        self.recent: deque[float] = deque()
        self.decisions: list[TunerDecision] = []

    def observe(self, t: float) -> None:
        self.recent.append(t)

    def rate(self, now: float) -> float:
        while self.recent and now - self.recent[0] > self.window:
            self.recent.popleft()
        span = min(self.window, now - self.start)
        return len(self.recent) / span if span > 0 else 0.0

    def tick(self, now: float) -> TunerDecision | None:
        if now - self.start < self.window:
            return None
        rate = self.rate(now)
        capacity = self.units * self.unit
        want = max(1, ceil_ratio(rate / (self.target * self.unit)))
        if rate > self.upper * capacity and want > self.units:
            kind = "scale-up"
        elif (rate < self.lower * capacity and want < self.units
              and now - self.last_change >= self.stabilization):
            kind = "scale-down"
        else:
            return None
        self.units = want
        self.last_change = now
        d = TunerDecision(now, kind, {s: want for s in self.stages}, rate, None, True)
        self.decisions.append(d)
        return d


def cg_tune(tuner: CoarseGrainedTuner, stream: Sequence[float], tick: float = TICK) -> list[TunerDecision]:
    """Drive the coarse-grained tuner over an arrival stream offline; returns its decisions."""
    stream = list(stream)
    if not stream:
        return []
    end = stream[-1]
    i = 0
    for k in range(1, int((end - tuner.start) // tick) + 1):
        t = tuner.start + k * tick
        while i < len(stream) and stream[i] < t:
            tuner.observe(stream[i])
            i += 1
        tuner.tick(t)
    return list(tuner.decisions)


# --------------------------------------------------------------------------
# Replay
# --------------------------------------------------------------------------


def replay(spec: PipelineSpec, config: PipelineConfig, profiles: Mapping[str, ModelProfile], trace: ArrivalTrace,
           slo: float, policy: str = "none", *, catalog: HardwareCatalog, tuner_state: TunerState | None = None,
           cg_tuner: CoarseGrainedTuner | None = None, activation_delay: float = ACTIVATION_DELAY,
           tick: float = TICK) -> SimReport:
    """Replay ``trace`` against a cluster whose replica counts follow ``policy``.

    Added replicas serve traffic ``activation_delay`` seconds after the
    decision but are billed from the decision; removed replicas stop being
    billed at the decision and finish their in-flight batch.
    """
    if policy not in POLICIES:
        raise ValidationError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if policy == "inferline" and tuner_state is None:
        raise ConfigurationError("policy 'inferline' needs a tuner state from the planner")
    if policy == "cg" and cg_tuner is None:
        raise ConfigurationError("policy 'cg' needs a coarse-grained tuner")
    duration = trace.duration if len(trace) else 0.0
    timeline = ClusterTimeline.start(config)
    if not len(trace):
        return SimReport(policy, np.zeros(0), np.zeros(0), slo, 0.0, 0.0, [], timeline)

    tuner = Tuner(tuner_state) if policy == "inferline" else None
    stage_idx = {s: i for i, s in enumerate(spec.topo_order)}
    decisions: list[dict] = []
    engine_box: list[EventEngine] = []

    def apply(decision: TunerDecision) -> None:
        engine = engine_box[0]
        t = decision.time
        for stage, target in decision.targets.items():
            current = timeline.count(stage, math.inf)
            if target > current:
                for _ in range(target - current):
                    engine.activate(stage_idx[stage], t + activation_delay)
                timeline.set(stage, t + activation_delay, target, "active")
            elif target < current:
                engine.retire(stage_idx[stage], current - target)
                timeline.set(stage, t, target, "active")
            timeline.set(stage, t, target)
        decisions.append(decision.to_dict())

    entry = stage_idx[spec.entry]

    def observer(t: float, stage: int, q: int) -> None:
        if stage != entry:
            return
        if tuner is not None:
            d = tuner.observe(t)
            if d is not None:
                apply(d)
        elif cg_tuner is not None:
            cg_tuner.observe(t)

    engine = EventEngine(spec, config, profiles, trace, observer=observer if policy != "none" else None)
    engine_box.append(engine)

    if policy != "none":
        end = float(trace.arrivals[-1])
        for k in range(1, int(end // tick) + 1):
            t = k * tick
            engine.run(until=(t, ARRIVAL))
            d = tuner.tick(t) if tuner is not None else cg_tuner.tick(t)
            if d is not None:
                apply(d)
    engine.run()
    result = engine.result()
    cost = timeline.cost(catalog, config, duration)
    return SimReport(policy, result.latencies, result.arrivals, slo, cost, duration, decisions, timeline)
