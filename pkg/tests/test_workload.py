import numpy as np
import pytest

from inferline.core import Edge, PipelineSpec
from inferline.errors import ValidationError
from inferline.workload import (
    ArrivalTrace,
    compute_stats,
    format_trace,
    generate_gamma_trace,
    generate_varying_trace,
    parse_trace,
    read_trace,
    windowed_rates,
    write_trace,
)

BRANCHY = PipelineSpec(("a", "b", "c"), (Edge("a", "b", 0.3, "g"), Edge("a", "c")))


def test_gamma_rate_and_cv():
    stats = compute_stats(generate_gamma_trace(100, 1.0, 100, 7))
    assert stats.lam == pytest.approx(100, rel=0.05)
    assert stats.cv == pytest.approx(1.0, rel=0.10)


def test_gamma_near_deterministic_limit():
    t = generate_gamma_trace(50, 1e-6, 10, 1).arrivals
    assert np.max(np.abs(np.diff(t) - 1 / 50)) < 0.01 / 50


def test_gamma_bursty_cv():
    trace = generate_gamma_trace(150, 4.0, 100, 3)
    assert len(trace) >= 10_000
    assert compute_stats(trace).cv == pytest.approx(4.0, rel=0.15)


def test_gamma_reproducible_and_seed_sensitive():
    a = generate_gamma_trace(100, 2.0, 5, 11, BRANCHY)
    b = generate_gamma_trace(100, 2.0, 5, 11, BRANCHY)
    c = generate_gamma_trace(100, 2.0, 5, 12, BRANCHY)
    assert np.array_equal(a.arrivals, b.arrivals) and np.array_equal(a.path_choices, b.path_choices)
    assert not np.array_equal(a.arrivals[:10], c.arrivals[:10])


def test_gamma_strict_and_bounded():
    t = generate_gamma_trace(200, 8.0, 20, 5).arrivals
    assert np.all(np.diff(t) > 0) and t[-1] < 20 and t[0] >= 0


@pytest.mark.parametrize("args", [(0, 1, 10), (10, 0, 10), (10, 1, 0), (-1, 1, 1)])
def test_gamma_rejects_nonpositive(args):
    with pytest.raises(ValidationError):
        generate_gamma_trace(*args, seed=0)


def test_path_choices_follow_probabilities():
    trace = generate_gamma_trace(1000, 1.0, 20, 9, BRANCHY)
    assert trace.branch_ids == BRANCHY.branch_ids
    frac = float(np.mean(trace.path_choices[:, 0] == 0))
    sd = (0.3 * 0.7 / len(trace)) ** 0.5
    assert abs(frac - 0.3) < 3 * sd


def test_varying_single_segment_matches_gamma():
    a = generate_varying_trace([(80, 2.0, 10)], 5.0, 4)
    b = generate_gamma_trace(80, 2.0, 10, 4)
    assert np.array_equal(a.arrivals, b.arrivals)


def test_varying_transition_crosses_midpoint():
    trace = generate_varying_trace([(150, 1, 60), (250, 1, 60)], 20.0, 2)
    # transition runs from 60 s to 80 s; the 5 s window centred on 70 s sits at ~200 qps
    rate = windowed_rates(trace.arrivals, 5.0, 67.5, 72.5)[0]
    assert rate == pytest.approx(200, rel=0.10)


def test_varying_step_completes_within_one_window():
    trace = generate_varying_trace([(100, 1, 60), (300, 1, 60)], 0.0, 3)
    rates = windowed_rates(trace.arrivals, 5.0, 0, 120)
    before, after = rates[:12], rates[12:]
    assert before.max() < 150 and after.min() > 250


def test_varying_rejects_empty():
    with pytest.raises(ValidationError):
        generate_varying_trace([], 0.0, 1)


def test_stats_even_spacing():
    s = compute_stats([0, 1, 2, 3])
    assert (s.lam, s.sigma, s.cv) == (1.0, 0.0, 0.0)


def test_stats_hand_example():
    s = compute_stats([0, 1, 3])
    assert s.lam == pytest.approx(1 / 1.5) and s.sigma == pytest.approx(0.5)
    assert s.cv == pytest.approx(1 / 9)


def test_stats_needs_two_arrivals():
    with pytest.raises(ValidationError):
        compute_stats([1.0])


def test_trace_rejects_ties_unless_hand_built():
    with pytest.raises(ValidationError):
        ArrivalTrace(np.array([0.0, 0.0]), np.zeros((2, 0)))
    assert len(ArrivalTrace.from_times([0.0, 0.0])) == 2


def test_trace_file_round_trip(tmp_path):
    trace = generate_gamma_trace(50, 3.0, 4, 8, BRANCHY)
    path = tmp_path / "t.trace"
    write_trace(trace, path)
    back = read_trace(path)
    assert np.array_equal(back.arrivals, trace.arrivals)
    assert np.array_equal(back.path_choices, trace.path_choices)
    assert back.branch_ids == trace.branch_ids and back.seed == 8
    assert format_trace(back) == path.read_text()


def test_golden_trace_file_parses():
    from pathlib import Path

    text = (Path(__file__).parent / "golden" / "example.trace").read_text()
    trace = parse_trace(text)
    assert trace.arrivals.tolist() == [0.125, 0.5, 0.625, 1.25]
    assert trace.path_choices[:, 0].tolist() == [0, -1, -1, 0]
    assert format_trace(trace) == text


def test_trace_parse_errors():
    with pytest.raises(ValidationError):
        parse_trace("0.1\n")
    with pytest.raises(ValidationError):
        parse_trace('# {"format_version": 1, "branch_ids": []}\n0.1,3\n')
    with pytest.raises(ValidationError):
        parse_trace('# {"format_version": 1, "branch_ids": []}\n0.2\n0.1\n')
