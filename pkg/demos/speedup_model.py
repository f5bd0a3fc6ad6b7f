"""Predicted speedups of the largest preset for growing clusters.

Single-device times come from a short measurement on this machine.  The sweep
shows the Amdahl ceiling at infinite bandwidth and how a slow shared link
turns added nodes into a slowdown.
"""
import math

from convshard import SimConfig, SimDevice, amdahl_bound, preset, sweep_nodes
from convshard.simulator import calibrate, class_mean

spec = preset("500:1500")
cal = calibrate(spec, 1024, probe_batch=16)
print(f"measured per batch of 1024: conv {cal.conv_seconds:.1f}s, other layers {cal.comp_seconds:.1f}s")
print(f"serial fraction {cal.serial_fraction:.3f}, ceiling {amdahl_bound(cal.serial_fraction):.2f}x")

master = SimDevice(class_mean("cpu-low-mid"), "cpu-low-mid")
for bw in (math.inf, 1e9, 1e8, 5e6):
    cfg = SimConfig(spec, 1024, (master,), cal.conv_seconds, cal.comp_seconds, bw)
    curve = sweep_nodes(cfg, 32, seed=0)
    picks = {n: curve[n - 1].speedup for n in (2, 4, 8, 16, 32)}
    label = "inf" if math.isinf(bw) else f"{bw:.0e}"
    print(f"bandwidth {label:>5} b/s:", "  ".join(f"n={n}:{s:.2f}" for n, s in picks.items()))
