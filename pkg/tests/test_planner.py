import numpy as np
import pytest

from helpers import BATCHES, HARDWARE, MAX_REPLICAS, PRICES, oracle_for, random_instance, small_catalog
from inferline.core import Edge, ModelProfile, PipelineConfig, PipelineSpec, StageConfig, service_time
from inferline.errors import InfeasibleError, ProfileError
from inferline.planner import INCREASE_BATCH, REMOVE_REPLICA, Planner, downgrade_hardware, initialize, minimize_cost
from inferline.scenarios import default_catalog
from inferline.workload import ArrivalTrace, generate_gamma_trace
from oracles import exhaustive_optimum

ONE = PipelineSpec(("m",))
CAT = default_catalog()


def profile(model_id, table, s=1.0):
    return ModelProfile.from_latencies(model_id, table, s)


def test_initialize_adds_replicas_to_the_bottleneck():
    prof = {"m": profile("m", {("gpu", 1): 0.01})}
    trace = generate_gamma_trace(150, 1, 20, 1, ONE)
    cfg = initialize(ONE, prof, CAT, trace, 1.0)
    assert cfg["m"] == StageConfig("m", "gpu", 1, 2)


def test_initialize_rejects_slo_below_service_time():
    spec = PipelineSpec.chain("a", "b")
    prof = {"a": profile("a", {("gpu", 1): 0.01}), "b": profile("b", {("gpu", 1): 0.03})}
    with pytest.raises(InfeasibleError) as err:
        initialize(spec, prof, CAT, generate_gamma_trace(10, 1, 5, 1, spec), 0.030)
    assert err.value.service_time == pytest.approx(0.040)


def test_initialize_uses_scale_factors():
    spec = PipelineSpec(("a", "b"), (Edge("a", "b", 0.5, "g"),))
    prof = {"a": profile("a", {("gpu", 1): 0.02}), "b": profile("b", {("gpu", 1): 0.025}, 0.5)}
    n = 1000
    # evenly spaced at 100 qps, every other query takes the branch
    trace = ArrivalTrace.from_times(np.arange(n) * 0.01, spec, [[q % 2 - 1] for q in range(n)])
    cfg = initialize(spec, prof, CAT, trace, 1.0)
    assert cfg.replicas() == {"a": 2, "b": 2}


def test_initialize_picks_fastest_hardware():
    prof = {"m": profile("m", {("gpu", 1): 0.01, ("cpu", 1): 0.05})}
    cfg = initialize(ONE, prof, CAT, generate_gamma_trace(10, 1, 5, 1, ONE), 1.0)
    assert cfg["m"].hardware_id == "gpu"


def test_missing_profile():
    with pytest.raises(ProfileError):
        Planner(PipelineSpec.chain("a", "b"), {"a": profile("a", {("gpu", 1): 0.01})}, CAT,
                generate_gamma_trace(10, 1, 5, 1), 1.0)


def test_optimal_start_is_a_fixed_point():
    prof = {"m": profile("m", {("cpu", 1): 0.01})}
    res = minimize_cost(ONE, prof, CAT, generate_gamma_trace(5, 1, 10, 1, ONE), 1.0)
    assert res.iterations == 0 and res.config == res.initial
    assert res.config["m"] == StageConfig("m", "cpu", 1, 1)


def test_batch_growth_frees_a_replica():
    prof = {"m": profile("m", {("gpu", 1): 0.01, ("gpu", 2): 0.011})}
    trace = generate_gamma_trace(150, 1, 20, 1, ONE)
    res = minimize_cost(ONE, prof, CAT, trace, 0.2)
    assert [a.kind for a in res.actions] == [INCREASE_BATCH, REMOVE_REPLICA]
    assert res.config["m"] == StageConfig("m", "gpu", 2, 1)
    assert res.cost * 2 == Planner(ONE, prof, CAT, trace, 0.2).cost(res.initial)


def test_action_log_replays_to_the_result():
    sc_prof = {
        "a": profile("a", {("gpu", 1): 0.004, ("gpu", 2): 0.005, ("gpu", 4): 0.007,
                           ("cpu", 1): 0.006, ("cpu", 2): 0.012, ("cpu", 4): 0.024}),
        "b": profile("b", {("gpu", 1): 0.01, ("gpu", 2): 0.012, ("gpu", 4): 0.016,
                           ("cpu", 1): 0.08, ("cpu", 2): 0.15, ("cpu", 4): 0.3}),
    }
    spec = PipelineSpec.chain("a", "b")
    planner = Planner(spec, sc_prof, CAT, generate_gamma_trace(150, 1, 10, 2, spec), 0.1)
    res = planner.minimize_cost()
    assert res.replay() == res.config
    prev = res.initial
    for a in res.actions:
        before, after = prev[a.target], a.config[a.target]
        if after.max_batch_size != before.max_batch_size and after.hardware_id == before.hardware_id:
            assert after.max_batch_size == 2 * before.max_batch_size
        prev = a.config
    costs = [planner.cost(res.initial)] + [a.cost for a in res.actions]
    assert costs == sorted(costs, reverse=True)


def test_downgrade_rejected_when_cpu_needs_many_replicas():
    prof = {"m": profile("m", {("gpu", 1): 0.01, ("cpu", 1): 0.2})}
    trace = generate_gamma_trace(100, 1, 10, 3, ONE)
    planner = Planner(ONE, prof, CAT, trace, 1.0)
    cfg = planner.initialize()
    assert downgrade_hardware("m", cfg, ONE, prof, CAT, trace, 1.0) is None


def test_downgrade_accepted_for_serial_stage():
    # flat throughput on both devices, CPU at a seventh of the price
    prof = {"m": profile("m", {(hw, b): b * lat for hw, lat in (("gpu", 0.010), ("cpu", 0.011)) for b in (1, 2)})}
    trace = generate_gamma_trace(150, 1, 10, 3, ONE)
    planner = Planner(ONE, prof, CAT, trace, 0.5)
    cfg = planner.initialize()
    cand = planner.downgrade_hardware(cfg, "m")
    assert cand is not None and cand["m"].hardware_id == "cpu"
    assert cand["m"].replicas == 2
    assert planner.cost(cand) < planner.cost(cfg)


def test_downgrade_not_applicable_on_cheapest():
    prof = {"m": profile("m", {("gpu", 1): 0.01, ("cpu", 1): 0.012})}
    trace = generate_gamma_trace(10, 1, 5, 3, ONE)
    cfg = PipelineConfig.of(StageConfig("m", "cpu"))
    assert Planner(ONE, prof, CAT, trace, 1.0).downgrade_hardware(cfg, "m") is None


def two_stage_instances(count, seed=7):
    rng = np.random.default_rng(seed)
    out, i = [], 0
    while len(out) < count:
        inst = random_instance(rng, i, n_max=200)
        i += 1
        if len(inst["spec"].stages) == 2:
            out.append(inst)
    return out


@pytest.mark.parametrize("inst", two_stage_instances(8), ids=lambda inst: f"lam{inst['lam']:.0f}")
def test_optimal_or_certified_local_optimum(inst):
    planner = Planner(inst["spec"], inst["profiles"], small_catalog(), inst["trace"], inst["slo"],
                      max_replicas=MAX_REPLICAS)
    best = exhaustive_optimum(oracle_for(inst), HARDWARE, BATCHES, MAX_REPLICAS, PRICES, inst["slo"])
    try:
        res = planner.minimize_cost()
    except InfeasibleError:
        assert best is None
        return
    assert best is not None and res.cost >= best[0]
    if res.cost > best[0]:
        for c in res.config:
            for cand in (planner.remove_replica(res.config, c.model_id),
                         planner.increase_batch(res.config, c.model_id),
                         planner.downgrade_hardware(res.config, c.model_id)):
                assert cand is None or planner.cost(cand) >= res.cost or not planner.check(cand)


def test_result_meets_slo_and_service_time():
    inst = two_stage_instances(1, seed=11)[0]
    res = minimize_cost(inst["spec"], inst["profiles"], small_catalog(), inst["trace"], inst["slo"], MAX_REPLICAS)
    assert res.p99 <= inst["slo"]
    assert service_time(res.config, inst["profiles"], inst["spec"]) <= inst["slo"]
