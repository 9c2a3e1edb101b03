"""Synthetic pipelines used by the demos, the CLI ``scenario`` command and the tests.

Two hardware types: a GPU-class device at $0.70/h and a CPU-class one at
$0.10/h. Executor parameters are affine batch latencies chosen to mimic a
flat-throughput preprocessing stage and batching-friendly models.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

from inferline.core import Edge, HardwareCatalog, HardwareType, ModelProfile, PipelineSpec
from inferline.errors import ValidationError
from inferline.profiler import ExecutorModel, profile_pipeline
from inferline.workload import ArrivalTrace, generate_gamma_trace

GPU = "gpu"
CPU = "cpu"

BATCH_GRID = (1, 2, 4, 8, 16, 32)


def default_catalog() -> HardwareCatalog:
    return HardwareCatalog([
        HardwareType(GPU, Fraction("0.70"), 0),
        HardwareType(CPU, Fraction("0.10"), 1),
    ])


@dataclass(frozen=True)
class Scenario:
    name: str
    spec: PipelineSpec
    executors: Mapping[str, ExecutorModel]
    catalog: HardwareCatalog
    lam: float
    description: str = ""

    def profiles(self, sample: ArrivalTrace | None = None, seed: int = 0) -> dict[str, ModelProfile]:
        """Profile every stage; scale factors come from ``sample`` (default: 20 s at the nominal rate)."""
        if sample is None:
            sample = generate_gamma_trace(self.lam, 1.0, max(20.0, 2000 / self.lam), seed, self.spec)
        return profile_pipeline(self.spec, self.executors, self.catalog, sample, BATCH_GRID)


def _preprocess(name: str) -> ExecutorModel:
    # serial work: batching buys nothing, and the CPU is nearly as quick
    return ExecutorModel(name, {GPU: (0.0002, 0.0016), CPU: (0.0003, 0.0017)}, parallelizable=False,
                         max_batch_size=32)


def imbalanced() -> Scenario:
    """Cheap preprocessing feeding one heavy model that needs many replicas."""
    ex = {
        "pre": _preprocess("pre"),
        "heavy": ExecutorModel("heavy", {GPU: (0.010, 0.016), CPU: (0.080, 0.080)}, max_batch_size=32),
    }
    return Scenario("imbalanced", PipelineSpec.chain("pre", "heavy"), ex, default_catalog(), 200.0,
                    "preprocess -> heavy model; replica needs differ by more than 4x")


def trend() -> Scenario:
    """Four stages with one conditional branch."""
    spec = PipelineSpec(
        ("pre", "detect", "classify", "lang"),
        (Edge("pre", "detect"), Edge("detect", "classify", 0.4, "obj"), Edge("pre", "lang")),
    )
    ex = {
        "pre": _preprocess("pre"),
        "detect": ExecutorModel("detect", {GPU: (0.006, 0.0025), CPU: (0.060, 0.050)}, max_batch_size=32),
        "classify": ExecutorModel("classify", {GPU: (0.008, 0.004), CPU: (0.080, 0.060)}, max_batch_size=32),
        "lang": ExecutorModel("lang", {GPU: (0.0005, 0.0045), CPU: (0.0006, 0.0049)}, parallelizable=False,
                              max_batch_size=32),
    }
    return Scenario("trend", spec, ex, default_catalog(), 150.0,
                    "pre -> {detect -> classify (p=0.4), lang}")


def tuning() -> Scenario:
    """Three serial CPU-friendly stages around one GPU model; used for live-replay experiments.

    The serial stages run close to their single-replica capacity at the
    nominal rate, so their planned utilization stays at or above the
    model's and scaling back down with the pipeline-wide minimum ratio does
    not overshoot the planned counts.
    """
    def serial(name, per_query):
        return ExecutorModel(name, {GPU: (0.0005, per_query - 0.0015), CPU: (0.0005, per_query - 0.0005)},
                             parallelizable=False, max_batch_size=32)

    ex = {
        "decode": serial("decode", 0.012),
        "model": ExecutorModel("model", {GPU: (0.010, 0.016), CPU: (0.100, 0.100)}, max_batch_size=32),
        "filter": serial("filter", 0.011),
        "encode": serial("encode", 0.012),
    }
    return Scenario("tuning", PipelineSpec.chain("decode", "model", "filter", "encode"), ex, default_catalog(),
                    60.0, "decode -> GPU model -> filter -> encode")


def balanced() -> Scenario:
    """Two identical GPU stages: nothing for per-stage provisioning to exploit."""
    ex = {
        "a": ExecutorModel("a", {GPU: (0.005, 0.004)}, max_batch_size=32),
        "b": ExecutorModel("b", {GPU: (0.005, 0.004)}, max_batch_size=32),
    }
    return Scenario("balanced", PipelineSpec.chain("a", "b"), ex, default_catalog(), 100.0,
                    "two identical stages on one hardware type")


SCENARIOS = {"imbalanced": imbalanced, "trend": trend, "tuning": tuning, "balanced": balanced}


def get(name: str) -> Scenario:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
