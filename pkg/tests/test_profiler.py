import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inferline.core import Edge, ModelProfile, PipelineSpec
from inferline.errors import ProfileError, ValidationError
from inferline.profiler import (
    ExecutorModel,
    build_profile,
    estimate_scale_factors,
    profile_model,
    profile_pipeline,
    scale_factor_interval,
)
from inferline.workload import generate_gamma_trace

BATCHES = [1, 2, 4, 8, 16, 32]


def test_throughput_without_fixed_cost():
    entries = profile_model(ExecutorModel("m", {"gpu": (0.0, 0.002)}), ["gpu"], [1], 100)
    assert entries["gpu", 1].throughput == pytest.approx(500)


def test_batching_friendly_model():
    entries = profile_model(ExecutorModel("m", {"gpu": (0.019, 0.0007)}), ["gpu"], [1, 32], 320)
    assert entries["gpu", 32].throughput == pytest.approx(32 / (0.019 + 0.0224))
    assert entries["gpu", 1].throughput == pytest.approx(1 / 0.0197)
    assert entries["gpu", 32].throughput / entries["gpu", 1].throughput > 15


def test_serial_model_gains_nothing_from_batching():
    ex = ExecutorModel("pre", {"cpu": (0.0003, 0.0017)}, parallelizable=False, max_batch_size=32)
    entries = profile_model(ex, ["cpu"], BATCHES, 1000)
    assert entries["cpu", 32].throughput == pytest.approx(entries["cpu", 1].throughput, rel=0.05)


def test_batch_above_executor_maximum():
    ex = ExecutorModel("m", {"gpu": (0.01, 0.001)}, max_batch_size=8)
    with pytest.raises(ProfileError):
        profile_model(ex, ["gpu"], [1, 16], 100)


def test_rejects_bad_batch_sizes():
    ex = ExecutorModel("m", {"gpu": (0.01, 0.001)})
    with pytest.raises(ValidationError):
        profile_model(ex, ["gpu"], [], 10)
    with pytest.raises(ValidationError):
        profile_model(ex, ["gpu"], [3], 10)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.05), st.floats(1e-5, 0.02), st.booleans())
def test_emitted_profiles_pass_invariants(alpha, beta, parallel):
    ex = ExecutorModel("m", {"gpu": (alpha, beta)}, parallelizable=parallel, max_batch_size=32)
    prof = build_profile(ex, ["gpu"], BATCHES, 64)
    assert isinstance(prof, ModelProfile)
    assert prof.batch_sizes("gpu") == tuple(BATCHES)


def test_linear_pipeline_scale_factors():
    spec = PipelineSpec.chain("a", "b", "c")
    s = estimate_scale_factors(spec, generate_gamma_trace(500, 1, 4, 1, spec))
    assert s == {"a": 1.0, "b": 1.0, "c": 1.0}


def test_branch_scale_factor_within_three_sigma():
    spec = PipelineSpec(("a", "b"), (Edge("a", "b", 0.3, "g"),))
    trace = generate_gamma_trace(1000, 1, 10.5, 2, spec)
    assert len(trace) >= 10_000
    s = estimate_scale_factors(spec, trace)["b"]
    assert abs(s - 0.3) < 3 * (0.3 * 0.7 / len(trace)) ** 0.5
    lo, hi = scale_factor_interval(s, len(trace))
    assert lo < 0.3 < hi


def test_halves_agree():
    spec = PipelineSpec(("a", "b"), (Edge("a", "b", 0.4, "g"),))
    trace = generate_gamma_trace(1000, 1, 20, 5, spec)
    half = trace.duration / 2
    s1 = estimate_scale_factors(spec, trace.slice(0, half))["b"]
    s2 = estimate_scale_factors(spec, trace.slice(half, trace.duration + 1))["b"]
    n = min(len(trace.slice(0, half)), len(trace.slice(half, trace.duration + 1)))
    assert abs(s1 - s2) < 3 * (2 * 0.4 * 0.6 / n) ** 0.5


def test_never_visited_stage_warns():
    spec = PipelineSpec(("a", "b"), (Edge("a", "b", 0.0, "g"),))
    with pytest.warns(RuntimeWarning, match="never visited"):
        s = estimate_scale_factors(spec, generate_gamma_trace(500, 1, 3, 1, spec))
    assert s["b"] == 0.0


def test_small_sample_rejected():
    spec = PipelineSpec.chain("a", "b")
    with pytest.raises(ValidationError):
        estimate_scale_factors(spec, generate_gamma_trace(10, 1, 5, 1, spec))


def test_profile_pipeline_attaches_scale_factors():
    spec = PipelineSpec(("a", "b"), (Edge("a", "b", 0.5, "g"),))
    ex = {"a": ExecutorModel("a", {"gpu": (0.001, 0.001)}, max_batch_size=4),
          "b": ExecutorModel("b", {"gpu": (0.002, 0.001), "cpu": (0.01, 0.01)}, max_batch_size=4)}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        profiles = profile_pipeline(spec, ex, ["gpu", "cpu"], generate_gamma_trace(500, 1, 4, 1, spec))
    assert profiles["a"].hardware_ids == ("gpu",)
    assert set(profiles["b"].hardware_ids) == {"gpu", "cpu"}
    assert 0.4 < profiles["b"].scale_factor < 0.6
