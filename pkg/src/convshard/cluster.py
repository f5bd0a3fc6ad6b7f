"""Master orchestration and the worker service loop.

The master owns every parameter.  For each convolution it sends every worker
the layer input (or output gradient) together with that worker's slice of the
kernel bank, computes its own slice while the workers run, then reads the
results back in device order and writes each into its place in the full
output tensor.

Forward and kernel-gradient convolutions are split over output kernels, the
input-gradient convolution over input channels.  Every output element is
therefore computed by exactly one device with the same arithmetic as a
single-process run, and no partial sums ever have to be combined.
"""
import logging
import threading
import math
from collections import Counter
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .balance import DeviceBenchmark, Share, bench_spec_for, build_plan, run_benchmark
from .checkpoint import Checkpoint, save_checkpoint
from .errors import (
    ConfigurationError,
    ConvShardError,
    DimensionError,
    IncompletenessError,
    ProtocolError,
    ResultCorruptionError,
    TransportError,
    TransportTimeout,
    WorkerError,
)
from .metrics import MetricsRow, PhaseClock
from .network import init_params, train_step
from .protocol import (
    HEADER_SIZE,
    PROTOCOL_VERSION,
    AllOk,
    BenchReport,
    BenchRequest,
    ConvResult,
    ConvTask,
    Direction,
    Hello,
    TrainOver,
    empty_tensor,
    recv_body,
    recv_header,
    recv_message,
    send_message,
)
from .transport import DEFAULT_TIMEOUT, loopback_pair

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NETWORK = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

# images per benchmark probe: a slice of the first conv layer, not a full batch
DEFAULT_BENCH_BATCH = 16


@dataclass
class ClusterConfig:
    role: str = "master"
    master_address: str = ""
    worker_addresses: tuple = ()
    port: int = 7077
    timeout: float = DEFAULT_TIMEOUT
    connect_timeout: float = 10.0
    distribute_backward: bool = True

    def __post_init__(self):
        if self.role not in ("master", "worker"):
            raise ConfigurationError(f"role must be 'master' or 'worker', got {self.role!r}")
        if self.timeout <= 0:
            raise ConfigurationError("timeout must be positive")


# -- traffic accounting -----------------------------------------------------------


@dataclass(frozen=True)
class TrafficRecord:
    device_id: int
    message: str
    direction: Direction
    ordinal: int
    outgoing: bool
    floats: int
    frame_bytes: int


@dataclass
class TrafficLog:
    """Every ConvTask/ConvResult the master exchanged, with its size."""

    records: list = field(default_factory=list)

    def add(self, record):
        self.records.append(record)

    def clear(self):
        self.records.clear()

    def select(self, directions=None):
        return [r for r in self.records if directions is None or r.direction in directions]

    def float_bytes(self, directions=None):
        """Bytes of float64 tensor data in the selected messages."""
        return 8 * sum(r.floats for r in self.select(directions))

    def frame_bytes(self, directions=None):
        return sum(r.frame_bytes for r in self.select(directions))


# -- gather -----------------------------------------------------------------------


class Assembler:
    """Places per-device pieces of a tensor at their global index ranges."""

    def __init__(self, shares, axis, full_shape, out=None):
        self.shares = {s.device_id: s for s in shares}
        self.axis = axis
        self.full_shape = tuple(full_shape)
        if sum(s.count for s in shares) != self.full_shape[axis]:
            raise ConfigurationError(f"shares cover {sum(s.count for s in shares)} of {self.full_shape[axis]} entries")
        self.out = np.empty(self.full_shape) if out is None else out
        self.placed = set()

    def expected_shape(self, device_id):
        shape = list(self.full_shape)
        shape[self.axis] = self.shares[device_id].count
        return tuple(shape)

    def place(self, device_id, piece):
        if device_id not in self.shares:
            raise ResultCorruptionError(device_id, "returned a result but has no share")
        piece = np.asarray(piece)
        if piece.shape != self.expected_shape(device_id):
            raise ResultCorruptionError(
                device_id, f"result shape {piece.shape} != expected {self.expected_shape(device_id)}"
            )
        if device_id in self.placed:
            raise ResultCorruptionError(device_id, "returned more than one result")
        s = self.shares[device_id]
        index = [slice(None)] * len(self.full_shape)
        index[self.axis] = slice(s.start, s.stop)
        self.out[tuple(index)] = piece
        self.placed.add(device_id)

    def finish(self):
        missing = [d for d, s in self.shares.items() if s.count and d not in self.placed]
        if missing:
            raise IncompletenessError(missing[0], f"no result from device(s) {missing}")
        return self.out


def gather_and_reorder(results, shares, axis, full_shape):
    """Assemble ``{device_id: piece}`` (any order) into the full tensor in global index order."""
    asm = Assembler(shares, axis, full_shape)
    for device_id, piece in dict(results).items():
        asm.place(device_id, piece.output if isinstance(piece, ConvResult) else piece)
    return asm.finish()


# -- master -----------------------------------------------------------------------


@dataclass
class WorkerLink:
    device_id: int
    conn: object
    name: str = ""


class Master:
    """Conv executor that scatters each convolution over the connected workers.

    Device 0 is this process; ``connections[i]`` becomes device ``i + 1``.
    With no connections every call is a plain local convolution.
    """

    def __init__(self, connections=(), timeout=DEFAULT_TIMEOUT, distribute_backward=True, names=None):
        names = list(names or [])
        self.links = [
            WorkerLink(i + 1, c, names[i] if i < len(names) else getattr(c, "peer", f"worker{i + 1}"))
            for i, c in enumerate(connections)
        ]
        for link in self.links:
            link.conn.settimeout(timeout)
        self.timeout = timeout
        self.distribute_backward = distribute_backward
        self.plan = None
        self.clock = None
        self.traffic = TrafficLog()
        self.allok_sent = Counter()
        self.train_over_sent = Counter()
        self._greeted = False

    @property
    def devices(self):
        return 1 + len(self.links)

    def _phase(self, name):
        return self.clock.phase(name) if self.clock is not None else nullcontext()

    def _fail(self, link, exc, doing):
        if isinstance(exc, WorkerError):
            return exc
        kind = "timed out" if isinstance(exc, TransportTimeout) else "failed"
        return WorkerError(link.device_id, f"{link.name}: {doing} {kind}: {exc}")

    def hello(self):
        for link in self.links:
            try:
                send_message(link.conn, Hello("master"))
                reply = recv_message(link.conn)
            except (TransportError, ProtocolError) as exc:
                raise self._fail(link, exc, "hello") from exc
            if not isinstance(reply, Hello):
                raise WorkerError(link.device_id, f"{link.name}: expected Hello, got {type(reply).__name__}")
            if reply.protocol_version != PROTOCOL_VERSION:
                raise WorkerError(
                    link.device_id,
                    f"{link.name}: protocol version {reply.protocol_version}, master speaks {PROTOCOL_VERSION}",
                )
            if reply.device_name:
                link.name = reply.device_name
        self._greeted = True

    # conv executor interface used by convshard.network

    def forward(self, geo, x, kernels):
        return distribute_convolution(self, geo, Direction.FORWARD, x, kernels)

    def backward_input(self, geo, grad_out, kernels):
        if not self.distribute_backward:
            with self._phase("conv"):
                return T.conv2d_backward_input(grad_out, kernels)
        return distribute_convolution(self, geo, Direction.BACKWARD_DATA, None, kernels, grad_out)

    def backward_kernels(self, geo, x, grad_out, kernels):
        if not self.distribute_backward:
            with self._phase("conv"):
                return T.conv2d_backward_kernels(x, grad_out, kernels.shape)
        return distribute_convolution(self, geo, Direction.BACKWARD_KERNEL, x, kernels, grad_out)

    def shutdown(self):
        """Send TrainOver to every worker (once) and close the connections."""
        for link in self.links:
            if self.train_over_sent[link.device_id]:
                continue
            try:
                send_message(link.conn, TrainOver())
                self.train_over_sent[link.device_id] += 1
            except TransportError as exc:
                log.warning("device %d (%s): could not send TrainOver: %s", link.device_id, link.name, exc)
        self.close()

    def close(self):
        for link in self.links:
            link.conn.close()


def _slice_task(direction, share, ordinal, inputs, kernels, extra):
    a, b = share.start, share.stop
    if direction == Direction.FORWARD:
        return ConvTask(ordinal, direction, inputs, kernels[a:b])
    if direction == Direction.BACKWARD_DATA:
        return ConvTask(ordinal, direction, empty_tensor(), kernels[:, a:b], extra)
    return ConvTask(ordinal, direction, inputs, kernels[a:b], extra[:, a:b])


def compute_task(task):
    """Evaluate one ConvTask with the local tensor kernels."""
    if task.direction == Direction.FORWARD:
        if task.extra.size:
            raise DimensionError("forward task carries an unexpected extra tensor")
        return T.conv2d_forward(task.inputs, task.kernels)
    if task.direction == Direction.BACKWARD_DATA:
        if task.inputs.size:
            raise DimensionError("input-gradient task carries an unexpected input tensor")
        return T.conv2d_backward_input(task.extra, task.kernels)
    return T.conv2d_backward_kernels(task.inputs, task.extra, task.kernels.shape)


def _output_layout(direction, inputs, kernels, extra):
    """``(partition axis, full output shape)`` of a distributed conv."""
    if direction == Direction.FORWARD:
        n, c, h, w = inputs.shape
        m, _, kh, kw = kernels.shape
        return 1, (n, m, h - kh + 1, w - kw + 1)
    if direction == Direction.BACKWARD_DATA:
        n, _, oh, ow = extra.shape
        _, c, kh, kw = kernels.shape
        return 1, (n, c, oh + kh - 1, ow + kw - 1)
    return 0, kernels.shape


def distribute_convolution(master, geo, direction, inputs, kernels, extra=None):
    """Scatter one convolution, compute the master's share, gather the rest in device order."""
    direction = Direction(direction)
    if master.plan is None:
        if master.links:
            raise ConfigurationError("no workload plan: run handshake_and_balance first")
        shares_all = None
    else:
        assignment = master.plan.layer(geo.ordinal)
        shares_all = assignment.channels if direction == Direction.BACKWARD_DATA else assignment.kernels
    if shares_all is None or not master.links:
        with master._phase("conv"):
            return compute_task(_slice_task(direction, _whole(direction, kernels), geo.ordinal, inputs, kernels, extra))
    if master.plan.devices != master.devices:
        raise ConfigurationError(f"plan covers {master.plan.devices} devices, cluster has {master.devices}")

    axis, full_shape = _output_layout(direction, inputs, kernels, extra)
    asm = Assembler(shares_all, axis, full_shape)
    active = [(link, shares_all[link.device_id]) for link in master.links if shares_all[link.device_id].count]

    with master._phase("comm"):
        for link, share in active:
            task = _slice_task(direction, share, geo.ordinal, inputs, kernels, extra)
            try:
                sent = send_message(link.conn, task)
            except (TransportError, ProtocolError) as exc:
                raise master._fail(link, exc, "sending task") from exc
            master.traffic.add(
                TrafficRecord(link.device_id, "ConvTask", direction, geo.ordinal, True, task.float_count(), sent)
            )
            del task

    own = shares_all[0]
    if own.count:
        with master._phase("conv"):
            piece = compute_task(_slice_task(direction, own, geo.ordinal, inputs, kernels, extra))
        asm.place(0, piece)
        del piece

    for link, share in active:
        try:
            with master._phase("conv"):
                # waiting for the header is waiting on the worker's compute
                msg_type, length = recv_header(link.conn)
            with master._phase("comm"):
                result = recv_body(link.conn, msg_type, length)
        except (TransportError, ProtocolError) as exc:
            raise master._fail(link, exc, "receiving result") from exc
        if not isinstance(result, ConvResult):
            raise ResultCorruptionError(link.device_id, f"expected ConvResult, got {type(result).__name__}")
        if result.layer_ordinal != geo.ordinal or result.direction != direction:
            raise ResultCorruptionError(
                link.device_id,
                f"result for layer {result.layer_ordinal}/{result.direction.name}, "
                f"expected {geo.ordinal}/{direction.name}",
            )
        master.traffic.add(
            TrafficRecord(
                link.device_id, "ConvResult", direction, geo.ordinal, False, result.float_count(), HEADER_SIZE + length
            )
        )
        with master._phase("comm"):
            asm.place(link.device_id, result.output)
            del result
            try:
                send_message(link.conn, AllOk())
            except TransportError as exc:
                raise master._fail(link, exc, "acknowledging result") from exc
        master.allok_sent[link.device_id] += 1
    return asm.finish()


def _whole(direction, kernels):
    extent = kernels.shape[1] if direction == Direction.BACKWARD_DATA else kernels.shape[0]
    return Share(0, extent, 0, extent)


def handshake_and_balance(master, net_spec, batch, master_seconds=None, bench_batch=DEFAULT_BENCH_BATCH, benchmark=None):
    """Benchmark every device on a slice of the first conv layer and build the workload plan."""
    benchmark = benchmark or run_benchmark
    if master.links and not master._greeted:
        master.hello()
    spec = bench_spec_for(net_spec, max(1, min(batch, bench_batch)))
    for link in master.links:
        try:
            send_message(link.conn, BenchRequest(spec))
        except TransportError as exc:
            raise master._fail(link, exc, "benchmark request") from exc
    own = benchmark(spec) if master_seconds is None else master_seconds
    reports = [DeviceBenchmark(0, own)]
    for link in master.links:
        try:
            reply = recv_message(link.conn)
        except (TransportError, ProtocolError) as exc:
            raise master._fail(link, exc, "benchmark report") from exc
        if not isinstance(reply, BenchReport):
            raise WorkerError(link.device_id, f"{link.name}: expected BenchReport, got {type(reply).__name__}")
        try:
            reports.append(DeviceBenchmark(link.device_id, reply.elapsed_seconds))
        except ConvShardError as exc:
            raise WorkerError(link.device_id, f"{link.name}: unusable benchmark report: {exc}") from exc
    master.plan = build_plan(net_spec, reports)
    log.info(
        "workload plan: times=%s weights=%s kernels=%s",
        [r.elapsed for r in reports],
        [round(w, 4) for w in master.plan.weights],
        [[s.count for s in layer.kernels] for layer in master.plan.layers],
    )
    return master.plan


# -- worker -----------------------------------------------------------------------


@dataclass
class ServeResult:
    code: int
    reason: str
    tasks: int = 0


def worker_serve(conn, timeout=DEFAULT_TIMEOUT, benchmark=None, trace=None, name="worker"):
    """Answer master requests on ``conn`` until TrainOver; returns a :class:`ServeResult`.

    The worker keeps no state between tasks.  ``trace``, if a list, receives
    the type name of every message read.
    """
    benchmark = benchmark or run_benchmark
    conn.settimeout(timeout)
    tasks = 0

    def read():
        msg = recv_message(conn)
        if trace is not None:
            trace.append(type(msg).__name__)
        return msg

    try:
        while True:
            msg = read()
            if isinstance(msg, TrainOver):
                return ServeResult(EXIT_OK, "train over", tasks)
            if isinstance(msg, Hello):
                send_message(conn, Hello(name))
            elif isinstance(msg, BenchRequest):
                send_message(conn, BenchReport(benchmark(msg.spec)))
            elif isinstance(msg, ConvTask):
                try:
                    out = compute_task(msg)
                except ConvShardError as exc:
                    log.error("%s: malformed task for layer %d: %s", name, msg.layer_ordinal, exc)
                    return ServeResult(EXIT_DATA, f"malformed task: {exc}", tasks)
                reply = ConvResult(msg.layer_ordinal, msg.direction, out)
                del msg, out
                send_message(conn, reply)
                del reply
                ack = read()
                if not isinstance(ack, AllOk):
                    raise ProtocolError(f"expected AllOk, got {type(ack).__name__}")
                tasks += 1
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__} from master")
    except TransportTimeout as exc:
        return ServeResult(EXIT_NETWORK, f"timeout: {exc}", tasks)
    except TransportError as exc:
        return ServeResult(EXIT_NETWORK, f"connection lost: {exc}", tasks)
    except ProtocolError as exc:
        return ServeResult(EXIT_NETWORK, f"protocol violation: {exc}", tasks)
    finally:
        conn.close()


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch: int = 64
    epochs: int = 1
    lr: float = 0.01
    seed: int = 0
    run_id: str = "run"
    preset: str = ""
    checkpoint_path: str = None
    on_row: object = None  # callable(MetricsRow), e.g. MetricsWriter.write

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1:
            raise ConfigurationError("batch and epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")


@dataclass
class TrainResult:
    params: dict
    rows: list
    epochs: int
    batches: int


def _checkpoint(config, spec, params, epoch, batch, rng, reason):
    if not config.checkpoint_path:
        return
    save_checkpoint(
        config.checkpoint_path,
        Checkpoint(spec, params, epoch, batch, rng.bit_generator.state, {"reason": reason, "runId": config.run_id}),
    )


def master_train(spec, images, labels, config, master=None, params=None):
    """Seeded mini-batch SGD with convolutions routed through ``master`` (local when ``None``).

    Data is reshuffled every epoch from one generator seeded with
    ``config.seed``; the last batch of an epoch may be short.  Each worker is
    sent TrainOver exactly once when training completes.  On a failure the
    parameters after the last completed batch are checkpointed and the error
    is re-raised.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) != len(labels) or len(images) == 0:
        raise ConfigurationError(f"{len(images)} images but {len(labels)} labels")
    master = master or Master()
    if master.plan is None and master.links:
        handshake_and_balance(master, spec, config.batch)
    params = dict(params) if params is not None else init_params(spec, config.seed)
    rng = np.random.default_rng(config.seed)
    n = len(images)
    per_epoch = math.ceil(n / config.batch)
    rows = []
    done = 0
    epoch = b = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for b in range(per_epoch):
                idx = order[b * config.batch : (b + 1) * config.batch]
                clock = PhaseClock()
                master.clock = clock
                clock.start("comp")
                xb, yb = images[idx], labels[idx]
                step = train_step(spec, params, xb, yb, config.lr, conv=master, clock=clock)
                totals, wall = clock.stop()
                master.clock = None
                params = step.params
                done += 1
                row = MetricsRow(
                    config.run_id, config.preset or spec.name, config.batch, master.devices, epoch, b,
                    totals["comm"], totals["conv"], totals["comp"], wall, step.loss, step.accuracy,
                )
                rows.append(row)
                if config.on_row is not None:
                    config.on_row(row)
            _checkpoint(config, spec, params, epoch + 1, 0, rng, "epoch")
    except ConvShardError:
        master.clock = None
        _checkpoint(config, spec, params, epoch, b, rng, "failure")
        master.close()
        raise
    master.shutdown()
    return TrainResult(params, rows, config.epochs, done)


# -- in-process cluster -------------------------------------------------------------


class LoopbackCluster:
    """A master plus ``workers`` worker threads connected by in-memory pipes.

    Use as a context manager; ``results`` and ``traces`` hold each worker's
    :class:`ServeResult` and received message names after exit.
    """

    def __init__(self, workers, timeout=60.0, distribute_backward=True, benchmark=None):
        self.results = [None] * workers
        self.traces = [[] for _ in range(workers)]
        master_ends = []
        self.threads = []
        for i in range(workers):
            m_end, w_end = loopback_pair(f"worker{i + 1}")
            master_ends.append(m_end)

            def run(i=i, conn=w_end):
                self.results[i] = worker_serve(conn, timeout, benchmark, self.traces[i], f"loopback{i + 1}")

            t = threading.Thread(target=run, name=f"convshard-worker{i + 1}", daemon=True)
            self.threads.append(t)
        self.master = Master(master_ends, timeout, distribute_backward)
        for t in self.threads:
            t.start()

    def __enter__(self):
        return self.master

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.master.shutdown()
        else:
            self.master.close()
        for t in self.threads:
            t.join(timeout=30.0)
        return False
