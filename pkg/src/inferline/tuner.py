"""High-frequency tuner: traffic envelopes, deviation detection, replica rescaling."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from inferline.core import FORMAT_VERSION, ModelProfile, PipelineConfig, PipelineSpec, service_time
from inferline.errors import ConfigurationError, ValidationError
from inferline.workload import ArrivalTrace, compute_stats

MAX_WINDOW = 60.0
STABILIZATION_DELAY = 15.0
SCALE_DOWN_LOOKBACK = 30.0
SCALE_DOWN_SUBWINDOW = 5.0
ACTIVATION_DELAY = 5.0

# replica targets are ceilings of float ratios; absorb representation error
_CEIL_SLACK = 1e-9


def ceil_ratio(x: float) -> int:
    return int(math.ceil(x - _CEIL_SLACK))


def window_ladder(t_s: float, cap: float = MAX_WINDOW) -> tuple[float, ...]:
    """T_s, 2 T_s, 4 T_s, ... up to the largest value not above ``cap``."""
    if not t_s > 0:
        raise ValidationError("smallest window T_s must be positive")
    windows = [t_s]
    while windows[-1] * 2 <= cap:
        windows.append(windows[-1] * 2)
    return tuple(windows)


@dataclass(frozen=True)
class TrafficEnvelope:
    windows: tuple[float, ...]
    counts: tuple[int, ...]

    @property
    def rates(self) -> tuple[float, ...]:
        return tuple(q / w for q, w in zip(self.counts, self.windows))

    def to_dict(self) -> dict:
        return {"windows": list(self.windows), "counts": list(self.counts), "rates": list(self.rates)}


def _window_starts(t: np.ndarray, w: float) -> np.ndarray:
    """For each arrival j, the first index i with t[j] - t[i] <= w."""
    first = np.searchsorted(t, t - w, side="left")
    idx = np.arange(len(t))
    # the subtraction in the predicate rounds differently from t - w; settle the boundary exactly
    while True:
        prev = np.maximum(first - 1, 0)
        move_left = (first > 0) & (t[idx] - t[prev] <= w)
        stay = np.minimum(first, idx)
        move_right = (first < idx) & (t[idx] - t[stay] > w)
        if not move_left.any() and not move_right.any():
            return first
        first = np.where(move_left, first - 1, np.where(move_right, first + 1, first))


def build_envelope(arrivals: ArrivalTrace | Sequence[float], t_s: float | None = None,
                   windows: Sequence[float] | None = None) -> TrafficEnvelope:
    """Exact max count in any closed window of each ladder width, over all offsets."""
    if windows is None:
        if t_s is None:
            raise ValidationError("build_envelope needs T_s or an explicit window ladder")
        windows = window_ladder(t_s)
    windows = tuple(float(w) for w in windows)
    t = arrivals.arrivals if isinstance(arrivals, ArrivalTrace) else np.asarray(arrivals, dtype=np.float64)
    if not len(t):
        return TrafficEnvelope(windows, tuple(0 for _ in windows))
    idx = np.arange(len(t))
    counts = tuple(int((idx - _window_starts(t, w) + 1).max()) for w in windows)
    return TrafficEnvelope(windows, counts)


class StreamingEnvelope:
    """Incremental envelope over an ordered arrival stream.

    With ``horizon=None`` it covers the whole stream. Otherwise ``envelope(now)``
    describes only the arrivals in ``[now - horizon, now]``. Per window it
    keeps the timestamps of the last ``w`` seconds (the count of the window
    ending at each arrival) and a monotone deque of those counts for the
    sliding maximum.
    """

    def __init__(self, windows: Sequence[float], horizon: float | None = None):
        self.windows = tuple(float(w) for w in windows)
        self.horizon = horizon
        self.times: list[float] = []
        self._recent = [deque() for _ in self.windows]
        self._first: list[list[int]] = [[] for _ in self.windows]
        self._maxq = [deque() for _ in self.windows]  # (index, count), counts decreasing
        self._best = [0] * len(self.windows)
        self._start = 0
        self._trunc_ptr = [0] * len(self.windows)

    def add(self, t: float) -> None:
        if self.times and t < self.times[-1]:
            raise ValidationError("arrivals must be added in time order")
        j = len(self.times)
        self.times.append(t)
        times = self.times
        for i, w in enumerate(self.windows):
            recent = self._recent[i]
            recent.append(j)
            while t - times[recent[0]] > w:
                recent.popleft()
            c = len(recent)
            if self.horizon is None:
                if c > self._best[i]:
                    self._best[i] = c
                continue
            self._first[i].append(recent[0])
            mq = self._maxq[i]
            while mq and mq[-1][1] <= c:
                mq.pop()
            mq.append((j, c))

    def _expire(self, now: float) -> None:
        times = self.times
        while self._start < len(times) and now - times[self._start] > self.horizon:
            self._start += 1
        start = self._start
        for i in range(len(self.windows)):
            first = self._first[i]
            ptr = self._trunc_ptr[i]
            while ptr < len(first) and first[ptr] < start:
                ptr += 1
            self._trunc_ptr[i] = ptr
            mq = self._maxq[i]
            while mq and mq[0][0] < ptr:
                mq.popleft()

    def counts(self, now: float | None = None) -> tuple[int, ...]:
        if self.horizon is None:
            return tuple(self._best)
        if now is None:
            now = self.times[-1] if self.times else 0.0
        self._expire(now)
        out = []
        for i in range(len(self.windows)):
            # windows whose members started before the horizon are cut at its edge
            truncated = self._trunc_ptr[i] - self._start
            full = self._maxq[i][0][1] if self._maxq[i] else 0
            out.append(max(truncated, full))
        return tuple(out)

    def envelope(self, now: float | None = None) -> TrafficEnvelope:
        return TrafficEnvelope(self.windows, self.counts(now))


@dataclass(frozen=True)
class Trigger:
    r_max: float
    window: float
    window_index: int


def detect(live: TrafficEnvelope, plan: TrafficEnvelope) -> Trigger | None:
    """Scale-up trigger when any live rate exceeds the planning rate at the same window."""
    if len(live.windows) != len(plan.windows) or any(
        not math.isclose(a, b, rel_tol=1e-12) for a, b in zip(live.windows, plan.windows)
    ):
        raise ConfigurationError("live and planning envelopes use different window ladders")
    best = None
    for i, (w, lr, pr) in enumerate(zip(live.windows, live.rates, plan.rates)):
        if lr > pr and (best is None or lr > best.r_max):
            best = Trigger(lr, w, i)
    return best


@dataclass
class TunerDecision:
    time: float
    trigger: str  # "scale-up", "scale-down" or "none"
    targets: dict[str, int]
    rate: float = 0.0
    window: float | None = None
    changed: bool = False

    def to_dict(self) -> dict:
        d = {"time": self.time, "trigger": self.trigger, "rate": self.rate, "targets": dict(self.targets),
             "changed": self.changed}
        if self.window is not None:
            d["window"] = self.window
        return d


@dataclass
class StageState:
    model_id: str
    mu: float
    scale_factor: float
    rho: float
    planned_replicas: int


@dataclass
class TunerState:
    plan_envelope: TrafficEnvelope
    stages: dict[str, StageState]
    replicas: dict[str, int]
    plan_lambda: float
    service_time: float
    last_change: float = -math.inf
    stabilization: float = STABILIZATION_DELAY
    lookback: float = SCALE_DOWN_LOOKBACK
    subwindow: float = SCALE_DOWN_SUBWINDOW
    activation_delay: float = ACTIVATION_DELAY

    @property
    def rho_p(self) -> float:
        visited = [s.rho for s in self.stages.values() if s.scale_factor > 0]
        return min(visited) if visited else 1.0

    @classmethod
    def from_plan(cls, spec: PipelineSpec, config: PipelineConfig, profiles: Mapping[str, ModelProfile],
                  plan_trace: ArrivalTrace) -> "TunerState":
        """Planner hand-off: planning envelope, per-stage mu, s and max-provisioning ratio.

        rho_m is the planned utilization lambda * s_m / (k_m * mu_m), capped at 1.
        """
        t_s = service_time(config, profiles, spec)
        envelope = build_envelope(plan_trace, t_s)
        lam = compute_stats(plan_trace).lam
        stages = {}
        for c in config:
            prof = profiles[c.model_id]
            mu = prof.throughput(c.hardware_id, c.max_batch_size)
            rho = min(1.0, lam * prof.scale_factor / (c.replicas * mu)) if prof.scale_factor > 0 else 1.0
            stages[c.model_id] = StageState(c.model_id, mu, prof.scale_factor, rho, c.replicas)
        return cls(envelope, stages, config.replicas(), lam, t_s)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "service_time": self.service_time,
            "plan_lambda": self.plan_lambda,
            "rho_p": self.rho_p,
            "plan_envelope": self.plan_envelope.to_dict(),
            "stages": {k: {"mu": v.mu, "scale_factor": v.scale_factor, "rho": v.rho,
                           "planned_replicas": v.planned_replicas} for k, v in self.stages.items()},
        }


def scale_up_targets(state: TunerState, r_max: float) -> dict[str, int]:
    """k_m = ceil(r_max s_m / (mu_m rho_m)), never below the current count."""
    out = {}
    for m, st in state.stages.items():
        k = ceil_ratio(r_max * st.scale_factor / (st.mu * st.rho)) if st.scale_factor > 0 else 1
        out[m] = max(state.replicas[m], k, 1)
    return out


def scale_up(state: TunerState, r_max: float, now: float = 0.0, window: float | None = None) -> TunerDecision:
    if not r_max > 0:
        raise ValidationError("r_max must be positive")
    targets = scale_up_targets(state, r_max)
    changed = targets != state.replicas
    if changed:
        state.replicas = dict(targets)
        state.last_change = now
    return TunerDecision(now, "scale-up", targets, r_max, window, changed)


def lambda_new(recent_arrivals: Sequence[float], now: float, lookback: float = SCALE_DOWN_LOOKBACK,
               subwindow: float = SCALE_DOWN_SUBWINDOW) -> float:
    """Max per-subwindow rate over the last ``lookback`` seconds; subwindows are (a, b]."""
    t = np.asarray(recent_arrivals, dtype=np.float64)
    n_sub = int(round(lookback / subwindow))
    best = 0.0
    for k in range(n_sub):
        hi = now - k * subwindow
        lo = hi - subwindow
        count = int(np.count_nonzero((t > lo) & (t <= hi)))
        best = max(best, count / subwindow)
    return best


def scale_down(state: TunerState, now: float, recent_arrivals: Sequence[float], history_start: float = 0.0,
               floor: Mapping[str, int] | None = None) -> TunerDecision | None:
    """k_m = ceil(lambda_new s_m / (mu_m rho_p)), never above the current count, at least 1.

    ``floor`` optionally holds per-stage counts the decision must not go
    below (the online tuner passes the current scale-up requirement).
    """
    if now - state.last_change < state.stabilization:
        return None
    if now - history_start < state.lookback:
        return None
    lam = lambda_new(recent_arrivals, now, state.lookback, state.subwindow)
    rho_p = state.rho_p
    targets = {}
    for m, st in state.stages.items():
        k = ceil_ratio(lam * st.scale_factor / (st.mu * rho_p)) if st.scale_factor > 0 else 1
        if floor is not None:
            k = max(k, floor.get(m, 1))
        targets[m] = max(1, min(state.replicas[m], k))
    changed = targets != state.replicas
    if not changed:
        return None
    state.replicas = dict(targets)
    state.last_change = now
    return TunerDecision(now, "scale-down", targets, lam, None, True)


class Tuner:
    """Sequential decision loop over an ordered stream of pipeline-entry arrivals."""

    def __init__(self, state: TunerState, start: float = 0.0):
        self.state = state
        self.live = StreamingEnvelope(state.plan_envelope.windows, horizon=state.plan_envelope.windows[-1])
        self.recent: deque[float] = deque()
        self.start = start
        self.decisions: list[TunerDecision] = []
        self.triggers: list[TunerDecision] = []

    def _requirement(self, now: float) -> dict[str, int] | None:
        trig = detect(self.live.envelope(now), self.state.plan_envelope)
        if trig is None:
            return None
        return {m: (ceil_ratio(trig.r_max * st.scale_factor / (st.mu * st.rho)) if st.scale_factor > 0 else 1)
                for m, st in self.state.stages.items()}

    def observe(self, t: float) -> TunerDecision | None:
        """Record an entry arrival; returns a scale-up decision that changes counts, if any."""
        self.live.add(t)
        self.recent.append(t)
        trig = detect(self.live.envelope(t), self.state.plan_envelope)
        if trig is None:
            return None
        decision = scale_up(self.state, trig.r_max, t, trig.window)
        if decision.changed:
            self.decisions.append(decision)
            self.triggers.append(decision)
            return decision
        return None

    def tick(self, now: float) -> TunerDecision | None:
        """Periodic check for scale-down."""
        while self.recent and now - self.recent[0] > self.state.lookback:
            self.recent.popleft()
        if now - self.state.last_change < self.state.stabilization:
            return None
        decision = scale_down(self.state, now, list(self.recent), self.start, floor=self._requirement(now))
        if decision is not None:
            self.decisions.append(decision)
        return decision
