import warnings
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convshard.balance import (
    BenchSpec,
    DeviceBenchmark,
    apportion_kernels,
    bench_spec_for,
    build_plan,
    compute_weights,
    equal_plan,
    plan_from_weights,
    run_benchmark,
)
from convshard.errors import ConfigurationError, DataError
from convshard.network import preset

from oracles import largest_remainder_brute, weights_exact

times_st = st.lists(st.floats(1e-3, 1e3, allow_nan=False), min_size=1, max_size=16)


def test_two_device_example():
    assert compute_weights([10, 20]) == [2 / 3, 1 / 3]


def test_equal_times_give_equal_weights():
    assert compute_weights([4.0] * 4) == [0.25] * 4


@settings(max_examples=200)
@given(times_st)
def test_weights_match_exact_rational_oracle(times):
    exact = weights_exact(times)
    for w, e in zip(compute_weights(times), exact):
        assert abs(Fraction(w) - e) <= Fraction(1, 10**12)


@pytest.mark.parametrize("bad", [[], [1.0, 0.0], [1.0, -2.0], [float("nan")]])
def test_weights_reject_invalid_times(bad):
    with pytest.raises(DataError):
        compute_weights(bad)


def test_apportion_examples():
    assert apportion_kernels(50, [0.4, 0.3, 0.2, 0.1]) == [20, 15, 10, 5]
    assert apportion_kernels(10, [1 / 3] * 3) == [4, 3, 3]
    assert apportion_kernels(1, [0.5, 0.5]) == [1, 0]
    assert apportion_kernels(7, [1.0]) == [7]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8).filter(lambda w: sum(w) > 0))
def test_apportion_matches_brute_force(num_k, weights):
    assert apportion_kernels(num_k, weights) == largest_remainder_brute(num_k, weights)


def test_apportion_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        apportion_kernels(0, [1.0])
    with pytest.raises(DataError):
        apportion_kernels(3, [0.0, 0.0])
    with pytest.raises(DataError):
        apportion_kernels(3, [])


def test_plan_ranges_are_contiguous_in_device_order():
    plan = plan_from_weights(preset("50:500"), [0.4, 0.3, 0.2, 0.1])
    first = plan.layer(0)
    assert [(s.start, s.stop) for s in first.kernels] == [(0, 20), (20, 35), (35, 45), (45, 50)]
    assert [s.count for s in first.channels] == [1, 1, 1, 0]
    assert plan.layer(1).kernels[-1].stop == 500


def test_build_plan_sorts_by_device_and_predicts_parallel_time():
    spec = preset("50:500")
    plan = build_plan(spec, [DeviceBenchmark(1, 20.0), DeviceBenchmark(0, 10.0)])
    assert plan.weights == (2 / 3, 1 / 3)
    assert plan.predicted_conv_time() == pytest.approx(20 / 3, abs=1e-9)


def test_build_plan_requires_contiguous_ids():
    with pytest.raises(ConfigurationError):
        build_plan(preset("50:500"), [DeviceBenchmark(0, 1.0), DeviceBenchmark(2, 1.0)])
    with pytest.raises(ConfigurationError):
        build_plan(preset("50:500"), [])


def test_device_benchmark_rejects_non_positive_time():
    with pytest.raises(DataError):
        DeviceBenchmark(3, 0.0)


def test_equal_plan_shares():
    plan = equal_plan(preset("50:500"), 3)
    assert [s.count for s in plan.layer(0).kernels] == [17, 17, 16]


def test_bench_spec_mirrors_first_conv_layer():
    spec = bench_spec_for(preset("150:800"), 8)
    assert spec.input_shape == (8, 3, 32, 32) and spec.kernel_shape == (150, 3, 5, 5)


@pytest.mark.parametrize(
    "inp,ker,reps", [((1, 3, 4, 4), (2, 2, 3, 3), 1), ((1, 3, 2, 2), (1, 3, 3, 3), 1), ((1, 1, 4, 4), (1, 1, 2, 2), 0)]
)
def test_bench_spec_validation(inp, ker, reps):
    with pytest.raises(ConfigurationError):
        BenchSpec(inp, ker, reps)


def test_tiny_benchmark_warns_but_reports_positive_time():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t = run_benchmark(BenchSpec((1, 1, 4, 4), (1, 1, 2, 2), 2, 0))
    assert t > 0
    assert any("reliability" in str(w.message) for w in caught)
