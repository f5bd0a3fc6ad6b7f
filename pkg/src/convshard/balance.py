"""Benchmark-proportional workload balancing.

Every device times the same convolution; device ``i`` with time ``t_i`` gets
weight ``w_i = (max(t) / t_i) / sum_j(max(t) / t_j)``, i.e. a share inversely
proportional to its time, so that ``w_i * t_i`` is equal for all devices.
Weights are turned into integer kernel counts per layer with largest-remainder
apportionment and laid out as contiguous index ranges in device order.
"""
import statistics
from fractions import Fraction
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError
from .tensor import conv2d_forward

MIN_RELIABLE_SECONDS = 1e-3


@dataclass(frozen=True)
class BenchSpec:
    input_shape: tuple  # (n, c, h, w)
    kernel_shape: tuple  # (num_k, c, kh, kw)
    repetitions: int = 3
    warmups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "kernel_shape", tuple(int(d) for d in self.kernel_shape))
        if len(self.input_shape) != 4 or len(self.kernel_shape) != 4:
            raise ConfigurationError("benchmark shapes must be 4-D")
        if min(self.input_shape) < 1 or min(self.kernel_shape) < 1:
            raise ConfigurationError(f"benchmark shapes must be non-empty: {self.input_shape}, {self.kernel_shape}")
        n, c, h, w = self.input_shape
        _, kc, kh, kw = self.kernel_shape
        if kc != c or kh > h or kw > w:
            raise ConfigurationError(f"kernel shape {self.kernel_shape} does not fit input {self.input_shape}")
        if self.repetitions < 1 or self.warmups < 0:
            raise ConfigurationError("repetitions must be >= 1 and warmups >= 0")


def bench_spec_for(net_spec, batch, repetitions=3, warmups=1):
    """Benchmark mirroring the first convolutional layer of ``net_spec`` at ``batch`` images."""
    geo = net_spec.conv_geometry()
    if not geo:
        raise ConfigurationError("network has no convolutional layer to benchmark")
    g = geo[0]
    return BenchSpec((batch, g.in_channels, g.in_h, g.in_w), g.kernel_shape, repetitions, warmups)


def run_benchmark(spec, seed=0):
    """Median wall-clock seconds of ``spec.repetitions`` convolutions on random data."""
    rng = np.random.default_rng(seed)
    x = rng.random(spec.input_shape)
    k = rng.random(spec.kernel_shape)
    for _ in range(spec.warmups):
        conv2d_forward(x, k)
    samples = []
    for _ in range(spec.repetitions):
        t0 = time.perf_counter()
        conv2d_forward(x, k)
        samples.append(time.perf_counter() - t0)
    elapsed = statistics.median(samples)
    if elapsed < MIN_RELIABLE_SECONDS:
        warnings.warn(
            f"benchmark took {elapsed * 1e3:.3f} ms, below the 1 ms reliability floor; "
            "use a larger benchmark or more repetitions",
            RuntimeWarning,
            stacklevel=2,
        )
    return max(elapsed, 1e-9)


@dataclass(frozen=True)
class DeviceBenchmark:
    device_id: int
    elapsed: float

    def __post_init__(self):
        if not self.elapsed > 0:
            raise DataError(f"device {self.device_id}: benchmark time must be > 0, got {self.elapsed}")


def compute_weights(times):
    """Workload fractions inversely proportional to the benchmark times."""
    times = [float(t) for t in times]
    if not times:
        raise DataError("need at least one benchmark time")
    if any(not t > 0 for t in times):
        raise DataError(f"benchmark times must be positive: {times}")
    tmax = max(times)
    perf = [tmax / t for t in times]
    total = sum(perf)
    return [p / total for p in perf]


def apportion_kernels(num_k, weights):
    """Largest-remainder (Hamilton) apportionment of ``num_k`` units.

    Quotas ``num_k * w_i / sum(w)`` are formed in exact rational arithmetic
    from the given floats, so the result never depends on rounding.  Every
    device gets the floor of its quota, then one extra unit each goes to the
    largest fractional remainders; equal remainders favour the lower index.
    """
    if num_k < 1:
        raise ConfigurationError(f"num_k must be >= 1, got {num_k}")
    if not weights or any(not w >= 0 for w in weights):
        raise DataError(f"invalid weights {weights}")
    exact = [Fraction(w) for w in weights]
    total = sum(exact)
    if total == 0:
        raise DataError("weights must not all be zero")
    quotas = [w * num_k / total for w in exact]
    counts = [q.numerator // q.denominator for q in quotas]
    leftover = num_k - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class Share:
    device_id: int
    count: int
    start: int
    stop: int


@dataclass(frozen=True)
class LayerAssignment:
    """Kernel ranges (forward and kernel-gradient) and input-channel ranges (input-gradient) of one conv layer."""

    ordinal: int
    kernels: tuple  # of Share, covering [0, num_kernels)
    channels: tuple  # of Share, covering [0, in_channels)


def _shares(total, weights):
    counts = apportion_kernels(total, weights)
    out, start = [], 0
    for dev, c in enumerate(counts):
        out.append(Share(dev, c, start, start + c))
        start += c
    return tuple(out)


@dataclass(frozen=True)
class WorkloadPlan:
    weights: tuple
    layers: tuple  # of LayerAssignment, one per conv layer
    times: tuple = ()

    @property
    def devices(self):
        return len(self.weights)

    def layer(self, ordinal):
        return self.layers[ordinal]

    def predicted_conv_time(self):
        """Idealized parallel time ``max_i(w_i * t_i)`` in benchmark units."""
        return max(w * t for w, t in zip(self.weights, self.times))


def plan_from_weights(net_spec, weights, times=()):
    geos = net_spec.conv_geometry()
    layers = tuple(
        LayerAssignment(g.ordinal, _shares(g.num_kernels, weights), _shares(g.in_channels, weights)) for g in geos
    )
    return WorkloadPlan(tuple(weights), layers, tuple(times))


def build_plan(net_spec, benchmarks):
    """Turn per-device benchmarks (device 0 = master) into a :class:`WorkloadPlan`."""
    if not benchmarks:
        raise ConfigurationError("cannot build a workload plan without any device benchmark")
    benchmarks = sorted(benchmarks, key=lambda b: b.device_id)
    if [b.device_id for b in benchmarks] != list(range(len(benchmarks))):
        raise ConfigurationError(f"device ids must be 0..n-1, got {[b.device_id for b in benchmarks]}")
    times = [b.elapsed for b in benchmarks]
    return plan_from_weights(net_spec, compute_weights(times), times)


def equal_plan(net_spec, devices):
    """Plan for ``devices`` identical devices."""
    return plan_from_weights(net_spec, compute_weights([1.0] * devices), [1.0] * devices)
