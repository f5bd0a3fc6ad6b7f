"""Analytic time model of distributed training.

Per batch:

* comm  = bits of float64 data exchanged for the distributed convolutions / bandwidth
  (+ an optional fixed latency per message),
* conv  = reference conv time scaled by ``reference_perf / sum(perf)``
  (ideal benchmark-proportional balance),
* comp  = reference time of all other layers, scaled to the master's perf
  (they run on the master only).

Speedup is measured against the reference device running the whole batch alone.
"""
import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .balance import WorkloadPlan, compute_weights, equal_plan, plan_from_weights
from .errors import ConfigurationError
from .metrics import PhaseClock
from .network import init_params, train_step

BYTES_PER_ELEMENT = 8
DEFAULT_BANDWIDTH = 5_000_000  # bits/s

# relative throughput ranges (worst, best) per device class, in units of
# roughly 100 GFLOPS of double-precision convolution throughput
DEVICE_CLASSES = {
    "cpu-low-mid": (1.0, 2.0),
    "cpu-high": (3.0, 6.0),
    "gpu-low-mid": (7.9, 11.7),
    "gpu-high": (30.0, 45.0),
    "mobile-gpu": (0.79, 1.17),
}


@dataclass(frozen=True)
class SimDevice:
    perf: float
    device_class: str = ""

    def __post_init__(self):
        if not self.perf > 0:
            raise ConfigurationError(f"device perf must be > 0, got {self.perf}")


def class_mean(device_class):
    lo, hi = _class_range(device_class)
    return (lo + hi) / 2


def _class_range(device_class):
    if device_class not in DEVICE_CLASSES:
        raise ConfigurationError(f"unknown device class {device_class!r}; choose from {sorted(DEVICE_CLASSES)}")
    return DEVICE_CLASSES[device_class]


def sample_devices(device_class, count, seed=0):
    """Gaussian perf values centred on the class range, +-2 sd spanning worst to best.

    Values are clamped below at a tenth of the mean so no device is
    nonphysically slow.
    """
    lo, hi = _class_range(device_class)
    mean, sd = (lo + hi) / 2, (hi - lo) / 4
    draws = np.random.default_rng(seed).normal(mean, sd, count)
    return [SimDevice(float(max(p, 0.1 * mean)), device_class) for p in draws]


@dataclass(frozen=True)
class SimConfig:
    net_spec: object
    batch: int
    devices: tuple  # of SimDevice; device 0 is the master
    baseline_conv_seconds: float
    baseline_comp_seconds: float
    bandwidth_bps: float = DEFAULT_BANDWIDTH
    reference_perf: float = None  # perf of the device the baselines were measured on; default devices[0]
    latency_seconds: float = 0.0
    bytes_per_element: int = BYTES_PER_ELEMENT
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.devices:
            raise ConfigurationError("need at least one device")
        if not self.bandwidth_bps > 0:
            raise ConfigurationError(f"bandwidth must be > 0, got {self.bandwidth_bps}")
        if self.baseline_conv_seconds <= 0 or self.baseline_comp_seconds <= 0:
            raise ConfigurationError("baseline conv and comp times must be > 0")
        if self.latency_seconds < 0:
            raise ConfigurationError("latency must be >= 0")
        if self.reference_perf is None:
            object.__setattr__(self, "reference_perf", self.devices[0].perf)

    @property
    def serial_fraction(self):
        return self.baseline_comp_seconds / (self.baseline_conv_seconds + self.baseline_comp_seconds)


@dataclass(frozen=True)
class SimResult:
    nodes: int
    bandwidth_bps: float
    comm_seconds: float
    conv_seconds: float
    comp_seconds: float
    total_seconds: float
    speedup: float
    elements: int = 0


def upload_elements(net_spec, batch, devices_or_plan):
    """Float64 elements exchanged for one forward pass of the conv layers.

    Each worker with a nonzero share receives the full layer input plus its
    own kernels and returns its own output maps; the master's share never
    touches the network.  ``devices_or_plan`` is a device count (equal
    shares) or a :class:`WorkloadPlan`.
    """
    if batch < 1:
        raise ConfigurationError(f"batch must be >= 1, got {batch}")
    if isinstance(devices_or_plan, WorkloadPlan):
        plan = devices_or_plan
    else:
        if int(devices_or_plan) < 1:
            raise ConfigurationError("need at least one device")
        plan = equal_plan(net_spec, int(devices_or_plan))
    total = 0
    for g, layer in zip(net_spec.conv_geometry(), plan.layers):
        workers = [s for s in layer.kernels[1:] if s.count]
        sent_kernels = sum(s.count for s in workers)
        total += g.in_h * g.in_w * g.in_channels * batch * len(workers)
        total += g.kh * g.kw * g.in_channels * sent_kernels
        total += g.out_h * g.out_w * batch * sent_kernels
    return total


def _messages(net_spec, plan):
    # ConvTask, ConvResult and AllOk per active worker per conv layer
    return sum(3 * sum(1 for s in layer.kernels[1:] if s.count) for layer in plan.layers)


def plan_for_devices(net_spec, devices):
    """Benchmark-proportional plan; a device's benchmark time is the inverse of its perf."""
    times = [1.0 / d.perf for d in devices]
    return plan_from_weights(net_spec, compute_weights(times), times)


def simulate_batch(config):
    plan = plan_for_devices(config.net_spec, config.devices)
    elements = upload_elements(config.net_spec, config.batch, plan)
    if math.isinf(config.bandwidth_bps):
        comm = 0.0
    else:
        comm = elements * config.bytes_per_element * 8 / config.bandwidth_bps
    comm += config.latency_seconds * _messages(config.net_spec, plan)
    conv = config.baseline_conv_seconds * config.reference_perf / sum(d.perf for d in config.devices)
    comp = config.baseline_comp_seconds * config.reference_perf / config.devices[0].perf
    total = comm + conv + comp
    single = config.baseline_conv_seconds + config.baseline_comp_seconds
    return SimResult(len(config.devices), config.bandwidth_bps, comm, conv, comp, total, single / total, elements)


def amdahl_bound(serial_fraction):
    if not 0 < serial_fraction < 1:
        raise ConfigurationError(f"serial fraction must be in (0, 1), got {serial_fraction}")
    return 1.0 / serial_fraction


def sweep_nodes(config, max_nodes, seed=0, device_class=None):
    """Results for 1..max_nodes devices.

    Device 0 is ``config.devices[0]``; devices 2..n are drawn once from
    ``device_class`` (default: the master's class) so every curve point
    extends the previous cluster by one device.
    """
    if max_nodes < 1:
        raise ConfigurationError(f"max_nodes must be >= 1, got {max_nodes}")
    master = config.devices[0]
    device_class = device_class or master.device_class
    extra = sample_devices(device_class, max_nodes - 1, seed) if max_nodes > 1 else []
    return [simulate_batch(replace(config, devices=(master, *extra[: n - 1]))) for n in range(1, max_nodes + 1)]


def bandwidth_sweep(config, bandwidths, node_counts, seed=0, device_class=None):
    """``{(bandwidth, nodes): SimResult}`` over the grid."""
    if any(not b > 0 for b in bandwidths):
        raise ConfigurationError("bandwidths must be > 0")
    grid = {}
    for bw in bandwidths:
        curve = sweep_nodes(replace(config, bandwidth_bps=bw), max(node_counts), seed, device_class)
        for n in node_counts:
            grid[(bw, n)] = curve[n - 1]
    return grid


CSV_COLUMNS = ["nodes", "bandwidthBps", "commS", "convS", "compS", "totalS", "speedup"]


def write_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow(
                [r.nodes, r.bandwidth_bps, r.comm_seconds, r.conv_seconds, r.comp_seconds, r.total_seconds, r.speedup]
            )


@dataclass(frozen=True)
class Calibration:
    conv_seconds: float  # per batch of ``batch`` images
    comp_seconds: float
    batch: int
    probe_batch: int
    probe: dict = field(default_factory=dict)

    @property
    def serial_fraction(self):
        return self.comp_seconds / (self.conv_seconds + self.comp_seconds)


def calibrate(net_spec, batch, probe_batch=32, seed=0):
    """Time one local training step on ``probe_batch`` random images and scale to ``batch``.

    Every layer's cost is linear in the batch size, so the split between
    convolution and other work carries over.
    """
    probe_batch = min(probe_batch, batch)
    rng = np.random.default_rng(seed)
    images = rng.random((probe_batch, *net_spec.input_shape))
    labels = rng.integers(0, net_spec.classes, probe_batch)
    params = init_params(net_spec, seed)
    clock = PhaseClock()
    clock.start("comp")
    train_step(net_spec, params, images, labels, 0.01, clock=clock)
    totals, wall = clock.stop()
    scale = batch / probe_batch
    return Calibration(totals["conv"] * scale, totals["comp"] * scale, batch, probe_batch, totals)
