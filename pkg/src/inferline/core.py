"""Domain types: hardware catalog, model profiles, pipeline DAGs and configurations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, Mapping

import numpy as np

from inferline.errors import CatalogError, ProfileError, ValidationError

FORMAT_VERSION = 1

# joint branch outcomes enumerated when deriving exact scale factors
MAX_BRANCH_OUTCOMES = 1 << 16


def is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0


def as_fraction(value) -> Fraction:
    """Exact rational from a JSON number or decimal string (0.7 -> 7/10)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


# --------------------------------------------------------------------------
# Hardware
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HardwareType:
    id: str
    cost_per_hour: Fraction
    latency_rank: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "cost_per_hour", as_fraction(self.cost_per_hour))
        if not self.id:
            raise ValidationError("hardware id must be non-empty")
        if self.cost_per_hour < 0:
            raise ValidationError(f"hardware {self.id!r}: negative cost_per_hour")


class HardwareCatalog(Mapping[str, HardwareType]):
    """Hardware types keyed by id; ``latency_rank`` must be a strict total order."""

    def __init__(self, hardware: Iterable[HardwareType]):
        self._by_id: dict[str, HardwareType] = {}
        for hw in hardware:
            if hw.id in self._by_id:
                raise ValidationError(f"duplicate hardware id {hw.id!r}")
            self._by_id[hw.id] = hw
        ranks = [hw.latency_rank for hw in self._by_id.values()]
        if len(set(ranks)) != len(ranks):
            raise ValidationError("latency_rank values must be unique (strict total order)")

    def __getitem__(self, hw_id: str) -> HardwareType:
        try:
            return self._by_id[hw_id]
        except KeyError:
            raise CatalogError(f"unknown hardware id {hw_id!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._by_id)

    def __len__(self) -> int:
        return len(self._by_id)

    def cost(self, hw_id: str) -> Fraction:
        return self[hw_id].cost_per_hour

    def fastest(self, hw_ids: Iterable[str]) -> str:
        """Lowest latency rank among ``hw_ids``, price ignored."""
        return min(hw_ids, key=lambda h: self[h].latency_rank)

    def next_cheaper(self, hw_id: str, candidates: Iterable[str]) -> str | None:
        """The most expensive candidate that is strictly cheaper than ``hw_id``."""
        ceiling = self.cost(hw_id)
        cheaper = [h for h in candidates if self.cost(h) < ceiling]
        if not cheaper:
            return None
        # equal prices: prefer the faster device, then id for determinism
        return min(cheaper, key=lambda h: (-self.cost(h), self[h].latency_rank, h))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "hardware": [
                {"id": hw.id, "cost_per_hour": float(hw.cost_per_hour), "latency_rank": hw.latency_rank}
                for hw in self._by_id.values()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HardwareCatalog":
        _check_version(data, "hardware catalog")
        try:
            return cls(
                HardwareType(h["id"], as_fraction(h["cost_per_hour"]), int(h["latency_rank"]))
                for h in data["hardware"]
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed hardware catalog: {exc}") from None


# --------------------------------------------------------------------------
# Profiles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileEntry:
    throughput: float
    batch_latency: float


@dataclass(frozen=True)
class ModelProfile:
    """Throughput/latency table of one model over the (hardware, batch size) grid."""

    model_id: str
    entries: Mapping[tuple[str, int], ProfileEntry]
    scale_factor: float = 1.0

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValidationError(f"profile {self.model_id!r} has no entries")
        if not 0.0 <= self.scale_factor <= 1.0:
            raise ValidationError(f"profile {self.model_id!r}: scale factor {self.scale_factor} outside [0, 1]")
        for (hw, b), e in self.entries.items():
            if not is_power_of_two(b):
                raise ValidationError(f"profile {self.model_id!r}: batch size {b} is not a power of two")
            if e.throughput <= 0 or e.batch_latency <= 0:
                raise ValidationError(f"profile {self.model_id!r}: nonpositive entry at ({hw}, {b})")
            if abs(e.batch_latency - b / e.throughput) > 1e-9:
                raise ValidationError(
                    f"profile {self.model_id!r}: batch_latency != b / throughput at ({hw}, {b})"
                )
        for hw in self.hardware_ids:
            sizes = self.batch_sizes(hw)
            for lo, hi in zip(sizes, sizes[1:]):
                a, z = self.entries[hw, lo], self.entries[hw, hi]
                # relative slack absorbs rounding on flat-throughput profiles
                if (z.throughput < a.throughput * (1 - 1e-12)
                        or z.batch_latency < a.batch_latency * (1 - 1e-12)):
                    raise ValidationError(
                        f"profile {self.model_id!r}: throughput/latency must be nondecreasing "
                        f"in batch size on {hw} ({lo} -> {hi})"
                    )

    @classmethod
    def from_latencies(
        cls, model_id: str, latencies: Mapping[tuple[str, int], float], scale_factor: float = 1.0
    ) -> "ModelProfile":
        entries = {k: ProfileEntry(k[1] / lat, lat) for k, lat in latencies.items()}
        return cls(model_id, entries, scale_factor)

    @cached_property
    def hardware_ids(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(hw for hw, _ in self.entries))

    def batch_sizes(self, hw_id: str) -> tuple[int, ...]:
        return tuple(sorted(b for h, b in self.entries if h == hw_id))

    def entry(self, hw_id: str, batch_size: int) -> ProfileEntry:
        try:
            return self.entries[hw_id, batch_size]
        except KeyError:
            raise ProfileError(
                f"model {self.model_id!r} has no profile entry for hardware {hw_id!r}, batch {batch_size}"
            ) from None

    def batch_latency(self, hw_id: str, batch_size: int) -> float:
        return self.entry(hw_id, batch_size).batch_latency

    def throughput(self, hw_id: str, batch_size: int) -> float:
        return self.entry(hw_id, batch_size).throughput

    def service_latencies(self, hw_id: str, max_batch: int) -> list[float]:
        """Service time for every actual batch size 0..max_batch (index 0 unused).

        A partial batch is charged the latency of the smallest profiled batch
        that holds it.
        """
        self.entry(hw_id, max_batch)
        sizes = [b for b in self.batch_sizes(hw_id) if b <= max_batch]
        out = [0.0] * (max_batch + 1)
        j = 0
        for actual in range(1, max_batch + 1):
            while sizes[j] < actual:
                j += 1
            out[actual] = self.entries[hw_id, sizes[j]].batch_latency
        return out

    def with_scale_factor(self, s: float) -> "ModelProfile":
        return replace(self, scale_factor=s)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "scale_factor": self.scale_factor,
            "entries": [
                {"hardware": hw, "batch_size": b, "throughput": e.throughput, "batch_latency": e.batch_latency}
                for (hw, b), e in sorted(self.entries.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelProfile":
        entries = {
            (e["hardware"], int(e["batch_size"])): ProfileEntry(float(e["throughput"]), float(e["batch_latency"]))
            for e in data["entries"]
        }
        return cls(data["model_id"], entries, float(data.get("scale_factor", 1.0)))


def profiles_to_dict(profiles: Mapping[str, ModelProfile]) -> dict:
    return {"format_version": FORMAT_VERSION, "profiles": [p.to_dict() for p in profiles.values()]}


def profiles_from_dict(data: Mapping) -> dict[str, ModelProfile]:
    _check_version(data, "profiles")
    try:
        profiles = [ModelProfile.from_dict(p) for p in data["profiles"]]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed profiles file: {exc}") from None
    return {p.model_id: p for p in profiles}


# --------------------------------------------------------------------------
# Pipeline DAG
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    """Dataflow edge. ``probability < 1`` makes it conditional.

    Conditional edges leaving the same stage with the same ``group`` are
    mutually exclusive alternatives of one branch point; the residual
    probability means none of them is taken.
    """

    src: str
    dst: str
    probability: float = 1.0
    group: str = ""

    @property
    def conditional(self) -> bool:
        return self.probability < 1.0


@dataclass(frozen=True)
class BranchPoint:
    id: str
    stage: str
    options: tuple[Edge, ...]

    @property
    def probabilities(self) -> tuple[float, ...]:
        return tuple(e.probability for e in self.options)

    @property
    def residual(self) -> float:
        return max(0.0, 1.0 - sum(self.probabilities))


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple[str, ...]
    edges: tuple[Edge, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "edges", tuple(self.edges))
        if not self.stages:
            raise ValidationError("empty pipeline")
        if len(set(self.stages)) != len(self.stages):
            raise ValidationError("duplicate stage ids")
        known = set(self.stages)
        seen = set()
        for e in self.edges:
            if e.src not in known or e.dst not in known:
                raise ValidationError(f"edge {e.src}->{e.dst} references an unknown stage")
            if e.src == e.dst:
                raise ValidationError(f"self-loop on {e.src}")
            if (e.src, e.dst) in seen:
                raise ValidationError(f"duplicate edge {e.src}->{e.dst}")
            if not 0.0 <= e.probability <= 1.0:
                raise ValidationError(f"edge {e.src}->{e.dst}: probability outside [0, 1]")
            seen.add((e.src, e.dst))
        roots = [s for s in self.stages if not self.parents(s)]
        if len(roots) != 1:
            raise ValidationError(f"pipeline must have exactly one entry stage, found {roots}")
        if len(self.topo_order) != len(self.stages):
            raise ValidationError("pipeline graph has a cycle")
        reachable = {self.entry}
        for s in self.topo_order:
            if s in reachable:
                reachable.update(e.dst for e in self.children(s))
        if reachable != known:
            raise ValidationError(f"stages unreachable from entry: {sorted(known - reachable)}")
        for bp in self.branch_points:
            if sum(bp.probabilities) > 1.0 + 1e-12:
                raise ValidationError(f"branch point {bp.id}: probabilities sum above 1")

    @classmethod
    def chain(cls, *stages: str) -> "PipelineSpec":
        return cls(tuple(stages), tuple(Edge(a, b) for a, b in zip(stages, stages[1:])))

    @cached_property
    def _children(self) -> dict[str, tuple[Edge, ...]]:
        return {s: tuple(e for e in self.edges if e.src == s) for s in self.stages}

    @cached_property
    def _parents(self) -> dict[str, tuple[Edge, ...]]:
        return {s: tuple(e for e in self.edges if e.dst == s) for s in self.stages}

    def children(self, stage: str) -> tuple[Edge, ...]:
        return self._children[stage]

    def parents(self, stage: str) -> tuple[Edge, ...]:
        return self._parents[stage]

    @cached_property
    def entry(self) -> str:
        return next(s for s in self.stages if not self.parents(s))

    @cached_property
    def topo_order(self) -> tuple[str, ...]:
        # Kahn's algorithm, ties broken by declaration order
        indeg = {s: len(self.parents(s)) for s in self.stages}
        order: list[str] = []
        ready = [s for s in self.stages if indeg[s] == 0]
        while ready:
            s = ready.pop(0)
            order.append(s)
            for e in self.children(s):
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
            ready.sort(key=self.stages.index)
        return tuple(order)

    @cached_property
    def topo_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.topo_order)}

    @cached_property
    def leaves(self) -> tuple[str, ...]:
        return tuple(s for s in self.topo_order if not self.children(s))

    @cached_property
    def branch_points(self) -> tuple[BranchPoint, ...]:
        out = []
        for s in self.topo_order:
            groups: dict[str, list[Edge]] = {}
            for e in self.children(s):
                if e.conditional:
                    groups.setdefault(e.group, []).append(e)
            for g, opts in groups.items():
                out.append(BranchPoint(s if not g else f"{s}:{g}", s, tuple(opts)))
        return tuple(out)

    @cached_property
    def branch_ids(self) -> tuple[str, ...]:
        return tuple(bp.id for bp in self.branch_points)

    def edge_route(self, edge: Edge) -> tuple[int, int] | None:
        """(branch point index, option index) selecting a conditional edge; None if unconditional."""
        if not edge.conditional:
            return None
        for i, bp in enumerate(self.branch_points):
            for j, opt in enumerate(bp.options):
                if opt == edge:
                    return i, j
        raise AssertionError("conditional edge without a branch point")

    def visits(self, choices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Visited stages and traversed edges for each query.

        ``choices`` has shape (n, len(branch_points)) with the chosen option
        index per branch point, -1 for none. Returns boolean arrays of shape
        (n, len(stages)) in ``stages`` order and (n, len(edges)).
        """
        choices = np.asarray(choices, dtype=np.int64)
        if choices.ndim != 2 or choices.shape[1] != len(self.branch_points):
            raise ValidationError("path choices must have one column per branch point")
        n = choices.shape[0]
        col = {s: i for i, s in enumerate(self.stages)}
        visited = np.zeros((n, len(self.stages)), dtype=bool)
        traversed = np.zeros((n, len(self.edges)), dtype=bool)
        visited[:, col[self.entry]] = True
        edge_idx = {e: i for i, e in enumerate(self.edges)}
        for s in self.topo_order:
            for e in self.children(s):
                taken = visited[:, col[s]].copy()
                route = self.edge_route(e)
                if route is not None:
                    taken &= choices[:, route[0]] == route[1]
                traversed[:, edge_idx[e]] = taken
                visited[:, col[e.dst]] |= taken
        return visited, traversed

    @cached_property
    def scale_factors(self) -> dict[str, float]:
        """Exact probability that a query entering the pipeline visits each stage.

        Equals the sum over incoming edges of parent scale factor times edge
        probability whenever the incoming edges are mutually exclusive
        (trees, or exclusive branches that re-join).
        """
        outcomes = []
        for bp in self.branch_points:
            opts = [(j, p) for j, p in enumerate(bp.probabilities) if p > 0]
            if bp.residual > 1e-15:
                opts.append((-1, bp.residual))
            outcomes.append(opts or [(-1, 1.0)])
        total = 1
        for o in outcomes:
            total *= len(o)
        if total > MAX_BRANCH_OUTCOMES:
            raise ValidationError("too many joint branch outcomes to derive scale factors exactly")
        combos = list(itertools.product(*outcomes))
        choices = np.array([[j for j, _ in c] for c in combos], dtype=np.int64).reshape(len(combos), -1)
        weights = np.array([float(np.prod([p for _, p in c])) for c in combos])
        visited, _ = self.visits(choices)
        s = weights @ visited
        return {stage: float(min(1.0, s[i])) for i, stage in enumerate(self.stages)}

    def to_dict(self) -> dict:
        edges = []
        for e in self.edges:
            d = {"src": e.src, "dst": e.dst, "probability": e.probability}
            if e.group:
                d["group"] = e.group
            edges.append(d)
        return {"format_version": FORMAT_VERSION, "stages": list(self.stages), "edges": edges}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineSpec":
        _check_version(data, "pipeline spec")
        try:
            edges = tuple(
                Edge(e["src"], e["dst"], float(e.get("probability", 1.0)), e.get("group", ""))
                for e in data.get("edges", [])
            )
            return cls(tuple(data["stages"]), edges)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed pipeline spec: {exc}") from None


# --------------------------------------------------------------------------
# Configurations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    model_id: str
    hardware_id: str
    max_batch_size: int = 1
    replicas: int = 1

    def __post_init__(self) -> None:
        if not is_power_of_two(self.max_batch_size):
            raise ValidationError(f"{self.model_id}: max_batch_size {self.max_batch_size} is not a power of two")
        if self.replicas < 1:
            raise ValidationError(f"{self.model_id}: replicas must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        ids = [s.model_id for s in self.stages]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate stage in configuration")

    @classmethod
    def of(cls, *stages: StageConfig) -> "PipelineConfig":
        return cls(tuple(stages))

    def __getitem__(self, model_id: str) -> StageConfig:
        for s in self.stages:
            if s.model_id == model_id:
                return s
        raise ValidationError(f"configuration has no stage {model_id!r}")

    def __contains__(self, model_id: object) -> bool:
        return any(s.model_id == model_id for s in self.stages)

    def __iter__(self) -> Iterator[StageConfig]:
        return iter(self.stages)

    def __len__(self) -> int:
        return len(self.stages)

    def with_stage(self, model_id: str, **changes) -> "PipelineConfig":
        return PipelineConfig(tuple(replace(s, **changes) if s.model_id == model_id else s for s in self.stages))

    def cost(self, catalog: HardwareCatalog) -> Fraction:
        return config_cost(self, catalog)

    def replicas(self) -> dict[str, int]:
        return {s.model_id: s.replicas for s in self.stages}

    def to_dict(self, catalog: HardwareCatalog | None = None) -> dict:
        d: dict = {
            "format_version": FORMAT_VERSION,
            "stages": [
                {"model_id": s.model_id, "hardware": s.hardware_id, "max_batch_size": s.max_batch_size,
                 "replicas": s.replicas}
                for s in self.stages
            ],
        }
        if catalog is not None:
            d["cost_per_hour"] = float(config_cost(self, catalog))
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        _check_version(data, "pipeline config")
        try:
            return cls(tuple(
                StageConfig(s["model_id"], s["hardware"], int(s["max_batch_size"]), int(s["replicas"]))
                for s in data["stages"]
            ))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed pipeline config: {exc}") from None


def config_cost(config: PipelineConfig, catalog: HardwareCatalog) -> Fraction:
    """Dollars per hour: sum of replicas times unit price, exact."""
    if not len(config):
        raise ValidationError("empty pipeline")
    return sum((s.replicas * catalog.cost(s.hardware_id) for s in config), Fraction(0))


def validate_config(config: PipelineConfig, spec: PipelineSpec, profiles: Mapping[str, ModelProfile]) -> None:
    """Every stage assigned, every (hardware, batch) pair profiled."""
    missing = [s for s in spec.stages if s not in config]
    if missing:
        raise ValidationError(f"configuration does not assign stages {missing}")
    extra = [s.model_id for s in config if s.model_id not in spec.stages]
    if extra:
        raise ValidationError(f"configuration assigns unknown stages {extra}")
    for s in config:
        if s.model_id not in profiles:
            raise ProfileError(f"no profile for model {s.model_id!r}")
        profiles[s.model_id].entry(s.hardware_id, s.max_batch_size)


def service_time(config: PipelineConfig, profiles: Mapping[str, ModelProfile], spec: PipelineSpec) -> float:
    """Longest root-to-leaf path of per-stage batch latencies at the configured max batch."""
    finish: dict[str, float] = {}
    for s in spec.topo_order:
        c = config[s]
        if s not in profiles:
            raise ProfileError(f"no profile for model {s!r}")
        own = profiles[s].batch_latency(c.hardware_id, c.max_batch_size)
        finish[s] = own + max((finish[e.src] for e in spec.parents(s)), default=0.0)
    return max(finish[s] for s in spec.leaves)


def _check_version(data: Mapping, what: str) -> None:
    if not isinstance(data, Mapping):
        raise ValidationError(f"{what}: expected a JSON object")
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValidationError(f"{what}: unsupported format_version {version}")
