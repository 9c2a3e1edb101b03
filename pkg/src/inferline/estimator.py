"""Discrete-event replay of a trace through a configured pipeline.

Each stage owns one centralized FIFO queue feeding its replicas. A replica
that goes idle drains up to ``max_batch_size`` queued queries into a batch;
every query in the batch completes when the batch does, then moves on to
the child stages chosen by the trace's pre-sampled path choices.
"""

from __future__ import annotations

import heapq
import math
from bisect import insort
from collections import deque
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from inferline.core import ModelProfile, PipelineConfig, PipelineSpec, validate_config
from inferline.errors import ConfigurationError, ProfileError, ValidationError
from inferline.workload import ArrivalTrace

# tie-break ranks for events at the same instant
COMPLETION = 0
ARRIVAL = 1
REPLICA_FREE = 2

KIND_NAMES = {COMPLETION: "completion", ARRIVAL: "arrival", REPLICA_FREE: "replica_free"}


def p99_rank(n: int) -> int:
    """1-based nearest rank of the 99th percentile: ceil(0.99 n)."""
    return (99 * n + 99) // 100


def percentile_nearest_rank(values, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if not len(v):
        raise ValidationError("percentile of an empty sample")
    rank = max(1, math.ceil(pct / 100.0 * len(v) - 1e-12))
    return float(v[rank - 1])


def p99(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if not len(v):
        raise ValidationError("percentile of an empty sample")
    return float(v[p99_rank(len(v)) - 1])


@dataclass(frozen=True)
class StageTiming:
    enqueue: float
    dequeue: float
    completion: float


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    arrival: float
    stages: Mapping[str, StageTiming]
    latency: float


class EventEngine:
    """The event loop shared by the estimator and the live-replay harness.

    ``run(until)`` processes events strictly before the (time, rank) key so
    a caller can interleave control actions: ``activate`` brings a new
    replica online at a given instant and ``retire`` removes replicas, idle
    ones immediately and busy ones once their batch completes.
    """

    def __init__(self, spec: PipelineSpec, config: PipelineConfig, profiles: Mapping[str, ModelProfile],
                 trace: ArrivalTrace, *, log: bool = False, slo: float | None = None,
                 abort_misses: int | None = None, observer: Callable[[float, int, int], None] | None = None):
        try:
            validate_config(config, spec, profiles)
        except ProfileError as exc:
            raise ConfigurationError(str(exc)) from None
        self.spec = spec
        self.stage_names = spec.topo_order
        S = len(self.stage_names)
        col = {s: i for i, s in enumerate(spec.stages)}
        topo_col = [col[s] for s in self.stage_names]
        self.n = n = len(trace)
        self.arrivals = trace.arrivals
        self._arr = trace.arrivals.tolist()

        self.max_batch = []
        self.latency = []
        for s in self.stage_names:
            c = config[s]
            self.max_batch.append(c.max_batch_size)
            self.latency.append(profiles[s].service_latencies(c.hardware_id, c.max_batch_size))
        replicas = [config[s].replicas for s in self.stage_names]

        visited, traversed = spec.visits(trace.choices_for(spec))
        edge_col = {e: i for i, e in enumerate(spec.edges)}
        topo_idx = {s: i for i, s in enumerate(self.stage_names)}
        self.children = [
            [(edge_col[e], topo_idx[e.dst]) for e in spec.children(s)] for s in self.stage_names
        ]
        self._trav = traversed.tolist()
        # number of traversed in-edges each query still waits on, per stage
        pend = np.zeros((n, S), dtype=np.int64)
        for e in spec.edges:
            pend[:, topo_idx[e.dst]] += traversed[:, edge_col[e]]
        self._pend = pend.tolist()
        self._remaining = visited[:, topo_col].sum(axis=1).tolist() if n else []
        self.entry = topo_idx[spec.entry]

        self.queues = [deque() for _ in range(S)]
        self.idle = [list(range(k)) for k in replicas]
        self.busy = [set() for _ in range(S)]
        self.retiring = [set() for _ in range(S)]
        self.next_replica = list(replicas)
        self.pending_rf = [0] * S
        self.pending_activations = [0] * S
        self.cancel_activations = [0] * S

        nan = math.nan
        self.enq = [[nan] * S for _ in range(n)]
        self.deq = [[nan] * S for _ in range(n)]
        self.comp = [[nan] * S for _ in range(n)]
        self.done = [nan] * n

        self.heap: list = []
        self.seq = n  # external arrivals take sequence numbers 0..n-1
        self.ext = 0
        self.now = 0.0
        self.slo = slo
        self.abort_misses = abort_misses
        self.misses = 0
        self.aborted = False
        self.observer = observer
        self.log: list[dict] | None = [] if log else None

    # -- control hooks ----------------------------------------------------

    def active_replicas(self, stage: int) -> int:
        return len(self.idle[stage]) + len(self.busy[stage]) - len(self.retiring[stage])

    def activate(self, stage: int, at: float) -> None:
        """Schedule one new replica for ``stage`` to come online at ``at``."""
        self.pending_activations[stage] += 1
        self._push(at, REPLICA_FREE, stage, -1, True)

    def retire(self, stage: int, count: int) -> None:
        """Take ``count`` replicas out: pending activations first, then idle, then busy after their batch."""
        for _ in range(count):
            live_pending = self.pending_activations[stage] - self.cancel_activations[stage]
            if live_pending > 0:
                self.cancel_activations[stage] += 1
            elif self.idle[stage]:
                r = self.idle[stage].pop()
                self._log("retire", stage, replica=r)
            else:
                candidates = sorted(self.busy[stage] - self.retiring[stage])
                if not candidates:
                    raise ConfigurationError(f"stage {self.stage_names[stage]!r} has no replica to retire")
                self.retiring[stage].add(candidates[-1])
                self._log("retire", stage, replica=candidates[-1], deferred=True)

    # -- event loop -------------------------------------------------------

    def _push(self, t: float, rank: int, stage: int, x, y) -> None:
        heapq.heappush(self.heap, (t, rank, self.seq, stage, x, y))
        self.seq += 1

    def _log(self, event: str, stage: int, **fields) -> None:
        if self.log is not None:
            self.log.append({"t": self.now, "event": event, "stage": self.stage_names[stage], **fields})

    def run(self, until: tuple[float, int] | None = None) -> bool:
        """Process events with (time, rank) below ``until``; False once aborted by the miss budget."""
        if self.aborted:
            return False
        heap = self.heap
        arr = self._arr
        n = self.n
        ut = math.inf if until is None else until[0]
        ur = 0 if until is None else until[1]
        entry = self.entry
        pop = heapq.heappop
        while True:
            j = self.ext
            if j < n:
                ta = arr[j]
                if heap:
                    top = heap[0]
                    take_ext = ta < top[0] or (ta == top[0] and (ARRIVAL < top[1] or (ARRIVAL == top[1] and j < top[2])))
                else:
                    take_ext = True
            elif heap:
                take_ext = False
            else:
                return True
            if take_ext:
                if ta > ut or (ta == ut and ARRIVAL >= ur):
                    return True
                self.ext = j + 1
                self.now = ta
                self._arrival(ta, entry, j)
                continue
            t, rank, _, stage, x, y = heap[0]
            if t > ut or (t == ut and rank >= ur):
                return True
            pop(heap)
            self.now = t
            if rank == COMPLETION:
                self._completion(t, stage, x, y)
                if self.aborted:
                    return False
            elif rank == ARRIVAL:
                self._arrival(t, stage, x)
            else:
                self._replica_free(t, stage, x, y)

    def _arrival(self, t: float, s: int, q: int) -> None:
        self.enq[q][s] = t
        if self.log is not None:
            self._log("arrival", s, query=q)
        if self.observer is not None:
            self.observer(t, s, q)
        self.queues[s].append(q)
        idle = self.idle[s]
        if idle and not self.pending_rf[s]:
            self.pending_rf[s] += 1
            self._push(t, REPLICA_FREE, s, idle[0], False)

    def _replica_free(self, t: float, s: int, r: int, activate: bool) -> None:
        if activate:
            self.pending_activations[s] -= 1
            if self.cancel_activations[s]:
                self.cancel_activations[s] -= 1
                return
            r = self.next_replica[s]
            self.next_replica[s] += 1
            insort(self.idle[s], r)
            if self.log is not None:
                self._log("activate", s, replica=r)
        else:
            self.pending_rf[s] -= 1
            if self.log is not None:
                self._log("replica_free", s, replica=r)
        queue = self.queues[s]
        idle = self.idle[s]
        B = self.max_batch[s]
        lat = self.latency[s]
        deq = self.deq
        while queue and idle:
            r = idle.pop(0)
            size = min(B, len(queue))
            batch = [queue.popleft() for _ in range(size)]
            for q in batch:
                deq[q][s] = t
            end = t + lat[size]
            self.busy[s].add(r)
            if self.log is not None:
                self._log("dispatch", s, replica=r, queries=batch, until=end)
            self._push(end, COMPLETION, s, r, batch)

    def _completion(self, t: float, s: int, r: int, batch: list) -> None:
        if self.log is not None:
            self._log("completion", s, replica=r, queries=list(batch))
        comp = self.comp
        children = self.children
        trav = self._trav
        pend = self._pend
        remaining = self._remaining
        for q in batch:
            comp[q][s] = t
            if children[s]:
                tq = trav[q]
                pq = pend[q]
                for ecol, child in children[s]:
                    if tq[ecol]:
                        pq[child] -= 1
                        if not pq[child]:
                            self._push(t, ARRIVAL, child, q, None)
            remaining[q] -= 1
            if not remaining[q]:
                self.done[q] = t
                if self.slo is not None and t - self._arr[q] > self.slo:
                    self.misses += 1
                    if self.abort_misses is not None and self.misses > self.abort_misses:
                        self.aborted = True
        self.busy[s].discard(r)
        if r in self.retiring[s]:
            self.retiring[s].discard(r)
            if self.log is not None:
                self._log("retired", s, replica=r)
        else:
            insort(self.idle[s], r)
        self.pending_rf[s] += 1
        self._push(t, REPLICA_FREE, s, r, False)

    # -- results ----------------------------------------------------------

    def result(self) -> "SimulationResult":
        return SimulationResult(
            stage_names=self.stage_names,
            arrivals=np.asarray(self.arrivals, dtype=np.float64),
            done=np.asarray(self.done, dtype=np.float64),
            enqueue=np.asarray(self.enq, dtype=np.float64).reshape(self.n, len(self.stage_names)),
            dequeue=np.asarray(self.deq, dtype=np.float64).reshape(self.n, len(self.stage_names)),
            completion=np.asarray(self.comp, dtype=np.float64).reshape(self.n, len(self.stage_names)),
            aborted=self.aborted,
            event_log=self.log,
        )


@dataclass
class SimulationResult:
    stage_names: tuple[str, ...]
    arrivals: np.ndarray
    done: np.ndarray
    enqueue: np.ndarray
    dequeue: np.ndarray
    completion: np.ndarray
    aborted: bool = False
    event_log: list[dict] | None = None

    @property
    def latencies(self) -> np.ndarray:
        return self.done - self.arrivals

    def p99(self) -> float:
        return p99(self.latencies)

    def records(self) -> list[QueryRecord]:
        out = []
        lat = self.latencies
        for q in range(len(self.arrivals)):
            stages = {
                name: StageTiming(float(self.enqueue[q, i]), float(self.dequeue[q, i]), float(self.completion[q, i]))
                for i, name in enumerate(self.stage_names)
                if not math.isnan(self.enqueue[q, i])
            }
            out.append(QueryRecord(q, float(self.arrivals[q]), stages, float(lat[q])))
        return out


def run_simulation(spec: PipelineSpec, config: PipelineConfig, profiles: Mapping[str, ModelProfile],
                   trace: ArrivalTrace, *, log: bool = False) -> SimulationResult:
    engine = EventEngine(spec, config, profiles, trace, log=log)
    engine.run()
    return engine.result()


def simulate(spec: PipelineSpec, config: PipelineConfig, profiles: Mapping[str, ModelProfile],
             trace: ArrivalTrace) -> list[QueryRecord]:
    """Per-query records of a deterministic replay."""
    return run_simulation(spec, config, profiles, trace).records()


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    p99: float

    def __bool__(self) -> bool:
        return self.feasible

    def __iter__(self):
        return iter((self.feasible, self.p99))


def feasible(spec: PipelineSpec, config: PipelineConfig, profiles: Mapping[str, ModelProfile],
             trace: ArrivalTrace, slo: float, *, early_exit: bool = False) -> Feasibility:
    """Whether the nearest-rank P99 over the whole trace meets ``slo``.

    With ``early_exit`` the replay stops as soon as enough queries have
    missed the SLO to decide infeasibility; the reported P99 is then ``inf``.
    """
    n = len(trace)
    if n == 0:
        raise ValidationError("feasibility needs a nonempty trace")
    budget = n - p99_rank(n)
    engine = EventEngine(spec, config, profiles, trace, slo=slo,
                         abort_misses=budget if early_exit else None)
    if not engine.run():
        return Feasibility(False, math.inf)
    value = p99(np.asarray(engine.done) - trace.arrivals)
    return Feasibility(value <= slo, value)
