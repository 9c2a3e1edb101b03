import math

import numpy as np
import pytest

from helpers import as_oracle_config, build_fixture, event_rows, load_golden, oracle_for, random_instance
from inferline.core import Edge, ModelProfile, PipelineConfig, PipelineSpec, StageConfig
from inferline.errors import ConfigurationError, ValidationError
from inferline.estimator import feasible, p99, run_simulation, simulate
from inferline.workload import ArrivalTrace, generate_gamma_trace
from oracles import nearest_rank_p99

ONE = PipelineSpec(("m",))


def one_stage(lat: dict, b=1, k=1):
    prof = {"m": ModelProfile.from_latencies("m", {("gpu", bb): v for bb, v in lat.items()})}
    return prof, PipelineConfig.of(StageConfig("m", "gpu", b, k))


@pytest.mark.parametrize("fx", load_golden(), ids=lambda fx: fx["name"])
def test_golden_event_log(fx):
    spec, profiles, config, trace = build_fixture(fx)
    res = run_simulation(spec, config, profiles, trace, log=True)
    assert event_rows(res.event_log) == fx["events"]
    assert res.latencies.tolist() == fx["latencies"]


def test_underload_has_no_queueing():
    prof, cfg = one_stage({1: 0.010})
    res = run_simulation(ONE, cfg, prof, ArrivalTrace.from_times([0.0, 1.0, 2.0, 3.0]))
    assert res.latencies.tolist() == pytest.approx([0.010] * 4)


def test_head_of_line_wait():
    prof, cfg = one_stage({1: 0.010})
    res = run_simulation(ONE, cfg, prof, ArrivalTrace.from_times([0.0, 0.0]))
    assert res.latencies.tolist() == pytest.approx([0.010, 0.020])


def test_batch_of_two_completes_together():
    prof, cfg = one_stage({1: 0.010, 2: 0.012}, b=2)
    res = run_simulation(ONE, cfg, prof, ArrivalTrace.from_times([0.0, 0.0]))
    assert res.latencies.tolist() == [0.012, 0.012]


def test_records_carry_stage_timings():
    prof, cfg = one_stage({1: 0.010})
    rec = simulate(ONE, cfg, prof, ArrivalTrace.from_times([0.0, 0.0]))
    assert rec[1].stages["m"].enqueue == 0.0
    assert rec[1].stages["m"].dequeue == pytest.approx(0.010)
    assert rec[1].latency == pytest.approx(0.020)


def test_unprofiled_pair_is_configuration_error():
    prof, _ = one_stage({1: 0.010})
    with pytest.raises(ConfigurationError):
        run_simulation(ONE, PipelineConfig.of(StageConfig("m", "gpu", 4)), prof, ArrivalTrace.from_times([0.0]))


def test_determinism_bit_identical():
    rng = np.random.default_rng(4)
    inst = random_instance(rng, 4)
    cfg = PipelineConfig(tuple(StageConfig(s, "fast", 2, 2) for s in inst["spec"].topo_order))
    a = run_simulation(inst["spec"], cfg, inst["profiles"], inst["trace"])
    b = run_simulation(inst["spec"], cfg, inst["profiles"], inst["trace"])
    assert a.latencies.tobytes() == b.latencies.tobytes()


def test_feasible_constant_latencies():
    prof, cfg = one_stage({1: 0.010})
    f = feasible(ONE, cfg, prof, ArrivalTrace.from_times(np.arange(50.0)), 0.1)
    assert f.feasible and f.p99 == pytest.approx(0.010)


def test_nearest_rank_of_constructed_vectors():
    # rank ceil(0.99 * 100) = 99 lands on the last 0.01
    assert p99([0.01] * 99 + [0.2]) == 0.01
    assert p99([0.01] * 98 + [0.2] * 2) == 0.2
    assert p99([0.2] + [0.01] * 99) == nearest_rank_p99([0.2] + [0.01] * 99)
    with pytest.raises(ValidationError):
        p99([])


@pytest.mark.parametrize("slow_queries, ok", [(1, True), (2, False)])
def test_feasible_tail_through_the_engine(slow_queries, ok):
    # a rare branch adds 0.19 s, so those queries take 0.2 s end to end
    spec = PipelineSpec(("a", "b"), (Edge("a", "b", 0.02, "g"),))
    prof = {"a": ModelProfile.from_latencies("a", {("gpu", 1): 0.01}),
            "b": ModelProfile.from_latencies("b", {("gpu", 1): 0.19}, 0.02)}
    cfg = PipelineConfig.of(StageConfig("a", "gpu"), StageConfig("b", "gpu"))
    choices = [[0] if q < slow_queries else [-1] for q in range(100)]
    trace = ArrivalTrace.from_times(np.arange(100.0), spec, choices)
    f = feasible(spec, cfg, prof, trace, 0.1)
    assert f.feasible is ok
    assert f.p99 == pytest.approx(0.01 if ok else 0.2)


def test_diverging_queue():
    prof, cfg = one_stage({1: 0.010})
    trace = generate_gamma_trace(200, 1.0, 10, 1, ONE)
    res = run_simulation(ONE, cfg, prof, trace)
    lat = res.latencies
    decile = len(lat) // 10
    assert lat[-decile:].min() > lat[:decile].max()
    short = feasible(ONE, cfg, prof, trace.slice(0, 5), 0.1)
    full = feasible(ONE, cfg, prof, trace, 0.1)
    assert not full.feasible and full.p99 > short.p99


def test_early_exit_reports_inf():
    prof, cfg = one_stage({1: 0.010})
    trace = generate_gamma_trace(200, 1.0, 5, 1, ONE)
    f = feasible(ONE, cfg, prof, trace, 0.05, early_exit=True)
    assert not f.feasible and math.isinf(f.p99)


def test_feasible_needs_queries():
    prof, cfg = one_stage({1: 0.010})
    with pytest.raises(ValidationError):
        feasible(ONE, cfg, prof, ArrivalTrace.from_times([]), 0.1)


@pytest.mark.parametrize("seed", range(30))
def test_matches_recurrence_oracle_on_trees(seed):
    rng = np.random.default_rng(1000 + seed)
    inst = random_instance(rng, seed, n_max=300)
    spec = inst["spec"]
    cfg = PipelineConfig(tuple(
        StageConfig(s, str(rng.choice(["fast", "slow"])), int(rng.choice([1, 2, 4])), int(rng.integers(1, 4)))
        for s in spec.topo_order
    ))
    got = run_simulation(spec, cfg, inst["profiles"], inst["trace"]).latencies
    want = oracle_for(inst).latencies(as_oracle_config(cfg))
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
