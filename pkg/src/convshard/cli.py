"""Command-line entry point: ``convshard {bench,master,worker,train-local,simulate}``."""
import argparse
import logging
import math
import os
import sys
import time
from dataclasses import replace

from .balance import DeviceBenchmark, bench_spec_for, run_benchmark
from .cluster import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_INTERNAL,
    EXIT_NETWORK,
    EXIT_OK,
    Master,
    TrainConfig,
    master_train,
    worker_serve,
)
from .config import RunConfig, from_mapping, load_config
from .data import load_cifar10, synthetic_cifar
from .errors import ConfigurationError, DataError, ProtocolError, TransportError, WorkerError
from .metrics import MetricsWriter
from .network import Conv, Pool
from .simulator import (
    DEFAULT_BANDWIDTH,
    DEVICE_CLASSES,
    SimConfig,
    SimDevice,
    calibrate,
    class_mean,
    simulate_batch,
    sweep_nodes,
    write_csv,
)
from .transport import accept, connect, listen, parse_address

log = logging.getLogger("convshard")

SHAPE_CHAIN = [32, 28, 14, 10, 5]


def check_shape_chain(spec):
    """The reference presets map 32x32 inputs through 28, 14, 10 and 5 pixel sides."""
    sides = [spec.input_shape[1]]
    for layer, shape in zip(spec.layers, spec.shapes()):
        if isinstance(layer, (Conv, Pool)):
            sides.append(shape[1])
    if sides != SHAPE_CHAIN:
        raise ConfigurationError(f"preset {spec.name} has spatial progression {sides}, expected {SHAPE_CHAIN}")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="TOML run configuration")
    p.add_argument("--preset", choices=["50:500", "150:800", "300:1000", "500:1500"])
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="CSV_PATH")
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--data", metavar="PATH", help="CIFAR-10 binary file or directory of data_batch_*.bin")
    p.add_argument("--synthetic", action="store_true", default=None, help="use seeded synthetic images")
    p.add_argument("--synthetic-size", type=int, dest="synthetic_size")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--no-checkpoint", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="convshard", description="Kernel-parallel distributed CNN training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="time this device on the first conv layer")
    _common(p)
    p.add_argument("--repetitions", type=int, default=3)

    p = sub.add_parser("master", help="train, distributing convolutions to workers")
    _common(p)
    _training(p)
    p.add_argument("--workers", metavar="ADDR,ADDR,...", help="worker addresses in device order")
    p.add_argument("--port", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--no-distribute-backward", action="store_true", default=None)

    p = sub.add_parser("worker", help="serve convolution requests from a master")
    _common(p)
    p.add_argument("--port", type=int)
    p.add_argument("--master", metavar="ADDR", help="only accept a connection from this host")
    p.add_argument("--timeout", type=float)

    p = sub.add_parser("train-local", help="single-process training (the speedup reference)")
    _common(p)
    _training(p)

    p = sub.add_parser("simulate", help="predict batch times for growing clusters")
    _common(p)
    p.add_argument("--nodes", type=int, default=32, help="largest cluster size")
    p.add_argument("--bandwidth", type=float, action="append", help="bits/s; repeatable; 'inf' allowed")
    p.add_argument("--device-class", choices=sorted(DEVICE_CLASSES), default="cpu-low-mid")
    p.add_argument("--reference-class", choices=sorted(DEVICE_CLASSES), help="class the baseline times belong to")
    p.add_argument("--equal", action="store_true", help="all devices at the class mean instead of sampled")
    p.add_argument("--baseline-conv", type=float, help="single-device conv seconds per batch")
    p.add_argument("--baseline-comp", type=float, help="single-device non-conv seconds per batch")
    p.add_argument("--probe-batch", type=int, default=32)
    p.add_argument("--latency", type=float, default=0.0)
    return parser


_CONFIG_FLAGS = (
    "preset", "batch", "epochs", "lr", "seed", "port", "data", "synthetic", "synthetic_size", "out",
    "checkpoint", "timeout", "master",
)


def resolve_config(args, role):
    base = load_config(args.config) if args.config else RunConfig(role=role)
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "no_distribute_backward", None):
        overrides["distribute_backward"] = False
    overrides["role"] = role
    return from_mapping(overrides, base)


def _dataset(cfg):
    if cfg.data:
        return load_cifar10(cfg.data)
    if cfg.synthetic:
        return synthetic_cifar(cfg.synthetic_size, cfg.seed)
    raise ConfigurationError("no training data: pass --data PATH or --synthetic")


def _checkpoint_path(cfg, args):
    if getattr(args, "no_checkpoint", False):
        return None
    if cfg.checkpoint:
        return cfg.checkpoint
    return (os.path.splitext(cfg.out)[0] if cfg.out else "convshard") + ".csck"


def _train(cfg, args, master):
    spec = cfg.net_spec()
    check_shape_chain(spec)
    data = _dataset(cfg)
    run_id = f"{cfg.role}-{cfg.preset}-b{cfg.batch}-n{master.devices}-s{cfg.seed}"
    writer = MetricsWriter(cfg.out) if cfg.out else None
    try:
        tc = TrainConfig(
            cfg.batch, cfg.epochs, cfg.lr, cfg.seed, run_id, cfg.preset, _checkpoint_path(cfg, args),
            writer.write if writer else None,
        )
        result = master_train(spec, data.images, data.labels, tc, master=master)
    finally:
        if writer:
            writer.close()
    first, last = result.rows[0], result.rows[-1]
    print(
        f"{result.batches} batches on {master.devices} device(s): loss {first.loss:.4f} -> {last.loss:.4f}, "
        f"mean batch {sum(r.totalS for r in result.rows) / len(result.rows):.3f}s"
    )
    return EXIT_OK


def cmd_bench(args):
    cfg = resolve_config(args, "local")
    spec = cfg.net_spec()
    bench = bench_spec_for(spec, cfg.batch, repetitions=args.repetitions)
    result = DeviceBenchmark(0, run_benchmark(bench, cfg.seed))
    print(f"{result} input={bench.input_shape} kernels={bench.kernel_shape}")
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write("deviceId,preset,batch,elapsedS\n")
            fh.write(f"{result.device_id},{cfg.preset},{cfg.batch},{result.elapsed!r}\n")
    return EXIT_OK


def cmd_train_local(args):
    cfg = resolve_config(args, "local")
    return _train(cfg, args, Master())


def cmd_master(args):
    cfg = resolve_config(args, "master")
    conns = []
    for text in cfg.workers:
        address = parse_address(text, cfg.port)
        try:
            conns.append(connect(address, timeout=cfg.timeout, connect_timeout=min(10.0, cfg.timeout)))
        except TransportError as exc:
            for c in conns:
                c.close()
            raise TransportError(f"worker {text}: {exc}") from exc
    master = Master(conns, cfg.timeout, cfg.distribute_backward, names=list(cfg.workers))
    return _train(cfg, args, master)


def cmd_worker(args):
    cfg = resolve_config(args, "worker")
    server = listen(cfg.port)
    try:
        log.info("worker listening on port %d", cfg.port)
        allowed = parse_address(cfg.master)[0] if cfg.master else None
        while True:
            conn = accept(server, cfg.timeout)
            if allowed is None or conn.peer.rsplit(":", 1)[0] == allowed:
                break
            log.warning("rejecting connection from %s (expecting %s)", conn.peer, allowed)
            conn.close()
    finally:
        server.close()
    result = worker_serve(conn, cfg.timeout, name=f"worker@{cfg.port}")
    print(f"worker finished: {result.reason} after {result.tasks} task(s)")
    return result.code


def cmd_simulate(args):
    cfg = resolve_config(args, "local")
    spec = cfg.net_spec()
    if (args.baseline_conv is None) != (args.baseline_comp is None):
        raise ConfigurationError("--baseline-conv and --baseline-comp go together")
    if args.baseline_conv is None:
        cal = calibrate(spec, cfg.batch, args.probe_batch, cfg.seed)
        conv_s, comp_s = cal.conv_seconds, cal.comp_seconds
        print(f"calibrated on this machine: conv {conv_s:.3f}s comp {comp_s:.3f}s per batch of {cfg.batch}")
    else:
        conv_s, comp_s = args.baseline_conv, args.baseline_comp
    ref_class = args.reference_class or args.device_class
    master_dev = SimDevice(class_mean(ref_class), ref_class)
    bandwidths = args.bandwidth or [DEFAULT_BANDWIDTH]
    results = []
    for bw in bandwidths:
        base = SimConfig(spec, cfg.batch, (master_dev,), conv_s, comp_s, bw, master_dev.perf, args.latency)
        if args.equal:
            dev = SimDevice(class_mean(args.device_class), args.device_class)
            curve = [
                simulate_batch(replace(base, devices=(master_dev,) + (dev,) * (n - 1))) for n in range(1, args.nodes + 1)
            ]
        else:
            curve = sweep_nodes(base, args.nodes, cfg.seed, args.device_class)
        results += curve
    for r in results:
        bw = "inf" if math.isinf(r.bandwidth_bps) else f"{r.bandwidth_bps:.3g}"
        print(
            f"nodes={r.nodes:3d} bw={bw} comm={r.comm_seconds:.3f}s conv={r.conv_seconds:.3f}s "
            f"comp={r.comp_seconds:.3f}s total={r.total_seconds:.3f}s speedup={r.speedup:.3f}"
        )
    if cfg.out:
        write_csv(results, cfg.out)
    return EXIT_OK


COMMANDS = {
    "bench": cmd_bench,
    "master": cmd_master,
    "worker": cmd_worker,
    "train-local": cmd_train_local,
    "simulate": cmd_simulate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors are configuration errors; --help exits cleanly
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"convshard: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, ProtocolError, WorkerError) as exc:
        print(f"convshard: network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (DataError, OSError) as exc:
        print(f"convshard: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"convshard: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
