"""Kernel-parallel distributed training of small convolutional networks.

Convolutions are split across a master and stateless workers by output kernel
(or input channel, for the input gradient), in proportion to each device's
measured speed; every other layer runs on the master.  A companion analytic
model predicts batch times and speedups for larger clusters.
"""
from .balance import apportion_kernels, build_plan, compute_weights, run_benchmark
from .cluster import LoopbackCluster, Master, TrainConfig, handshake_and_balance, master_train, worker_serve
from .network import custom_net, init_params, preset, train_step
from .simulator import SimConfig, SimDevice, amdahl_bound, simulate_batch, sweep_nodes, upload_elements

__version__ = "0.1.0"

__all__ = [
    "LoopbackCluster",
    "Master",
    "SimConfig",
    "SimDevice",
    "TrainConfig",
    "amdahl_bound",
    "apportion_kernels",
    "build_plan",
    "compute_weights",
    "custom_net",
    "handshake_and_balance",
    "init_params",
    "master_train",
    "preset",
    "run_benchmark",
    "simulate_batch",
    "sweep_nodes",
    "train_step",
    "upload_elements",
    "worker_serve",
]
