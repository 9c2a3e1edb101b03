"""Profile simulated model executors and estimate per-stage scale factors."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence


from inferline.core import FORMAT_VERSION, ModelProfile, PipelineSpec, ProfileEntry, is_power_of_two
from inferline.errors import ProfileError, ValidationError
from inferline.workload import ArrivalTrace

log = logging.getLogger(__name__)

MIN_SCALE_FACTOR_SAMPLE = 1000


@dataclass(frozen=True)
class ExecutorModel:
    """Affine batch latency ``alpha + beta * b`` per hardware type.

    A non-parallelizable model processes a batch one query after another, so
    its batch latency is ``b * (alpha + beta)`` and batching buys nothing.
    """

    model_id: str
    latency: Mapping[str, tuple[float, float]]
    parallelizable: bool = True
    max_batch_size: int = 64

    def __post_init__(self) -> None:
        for hw, (alpha, beta) in self.latency.items():
            if alpha < 0 or beta <= 0:
                raise ValidationError(f"executor {self.model_id!r} on {hw}: need alpha >= 0 and beta > 0")

    def batch_latency(self, hw_id: str, b: int) -> float:
        try:
            alpha, beta = self.latency[hw_id]
        except KeyError:
            raise ProfileError(f"executor {self.model_id!r} cannot run on hardware {hw_id!r}") from None
        if b > self.max_batch_size:
            raise ProfileError(
                f"batch size {b} exceeds the maximum {self.max_batch_size} of executor {self.model_id!r}"
            )
        if self.parallelizable:
            return alpha + beta * b
        return b * (alpha + beta)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "parallelizable": self.parallelizable,
            "max_batch_size": self.max_batch_size,
            "hardware": {hw: {"alpha": a, "beta": b} for hw, (a, b) in self.latency.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExecutorModel":
        try:
            return cls(
                data["model_id"],
                {hw: (float(v["alpha"]), float(v["beta"])) for hw, v in data["hardware"].items()},
                bool(data.get("parallelizable", True)),
                int(data.get("max_batch_size", 64)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed executor description: {exc}") from None


def executors_to_dict(executors: Iterable[ExecutorModel]) -> dict:
    return {"format_version": FORMAT_VERSION, "executors": [e.to_dict() for e in executors]}


def executors_from_dict(data: Mapping) -> dict[str, ExecutorModel]:
    if data.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ValidationError(f"unsupported executors format_version {data.get('format_version')}")
    try:
        items = [ExecutorModel.from_dict(e) for e in data["executors"]]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed executors file: {exc}") from None
    return {e.model_id: e for e in items}


def _timed_run(executor: ExecutorModel, hw_id: str, b: int, n_queries: int) -> tuple[float, int]:
    """Push ``n_queries`` through one replica in full batches; returns (busy seconds, queries served)."""
    n_batches = max(1, n_queries // b)
    clock = 0.0
    for _ in range(n_batches):
        clock += executor.batch_latency(hw_id, b)
    return clock, n_batches * b


def profile_model(executor: ExecutorModel, hardware: Iterable[str], batch_sizes: Sequence[int],
                  sample: ArrivalTrace | int) -> dict[tuple[str, int], ProfileEntry]:
    """Throughput and mean batch latency for every (hardware, batch size) pair.

    The executor runs the sample queries in isolation, back to back; arrival
    times do not matter, only the number of queries.
    """
    batch_sizes = sorted(set(int(b) for b in batch_sizes))
    if not batch_sizes:
        raise ValidationError("batch_sizes must be nonempty")
    for b in batch_sizes:
        if not is_power_of_two(b):
            raise ValidationError(f"batch size {b} is not a power of two")
    n_queries = sample if isinstance(sample, int) else len(sample)
    if n_queries < 1:
        raise ValidationError("profiling sample is empty")
    entries = {}
    for hw in hardware:
        for b in batch_sizes:
            busy, served = _timed_run(executor, hw, b, n_queries)
            n_batches = served // b
            entries[hw, b] = ProfileEntry(throughput=served / busy, batch_latency=busy / n_batches)
    return entries


def build_profile(executor: ExecutorModel, hardware: Iterable[str], batch_sizes: Sequence[int],
                  sample: ArrivalTrace | int, scale_factor: float = 1.0) -> ModelProfile:
    return ModelProfile(executor.model_id, profile_model(executor, hardware, batch_sizes, sample), scale_factor)


def estimate_scale_factors(spec: PipelineSpec, sample: ArrivalTrace) -> dict[str, float]:
    """Fraction of sample queries whose pre-sampled path visits each stage."""
    n = len(sample)
    if n < MIN_SCALE_FACTOR_SAMPLE:
        raise ValidationError(
            f"scale factors need at least {MIN_SCALE_FACTOR_SAMPLE} sample queries, got {n}"
        )
    visited, _ = spec.visits(sample.choices_for(spec))
    counts = visited.sum(axis=0)
    out = {}
    for i, stage in enumerate(spec.stages):
        out[stage] = float(counts[i]) / n
        if counts[i] == 0:
            msg = f"stage {stage!r} was never visited by the sample; scale factor 0, stage excluded from planning"
            log.warning(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return out


def scale_factor_interval(s: float, n: int, z: float = 3.0) -> tuple[float, float]:
    """Wilson score interval for a visit frequency ``s`` estimated from ``n`` queries."""
    if n <= 0:
        return 0.0, 1.0
    denom = 1 + z * z / n
    centre = (s + z * z / (2 * n)) / denom
    half = z * math.sqrt(s * (1 - s) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def profile_pipeline(spec: PipelineSpec, executors: Mapping[str, ExecutorModel], hardware: Iterable[str],
                     sample: ArrivalTrace, batch_sizes: Sequence[int] | None = None) -> dict[str, ModelProfile]:
    """Profiles for every stage with scale factors estimated from ``sample``."""
    hardware = list(hardware)
    scale = estimate_scale_factors(spec, sample)
    profiles = {}
    for stage in spec.stages:
        if stage not in executors:
            raise ProfileError(f"no executor for stage {stage!r}")
        ex = executors[stage]
        sizes = batch_sizes or [1 << i for i in range(int(math.log2(ex.max_batch_size)) + 1)]
        hw = [h for h in hardware if h in ex.latency]
        if not hw:
            raise ProfileError(f"executor {stage!r} supports none of the requested hardware")
        profiles[stage] = build_profile(ex, hw, sizes, sample, scale[stage])
    return profiles
