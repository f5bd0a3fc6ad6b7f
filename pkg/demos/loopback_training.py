"""Train the same small network locally and on a 3-worker in-memory cluster.

The workers report made-up benchmark times, so the kernel split is uneven.
Final parameters still match bit for bit, and the per-batch time split shows
where a distributed batch spends its time.
"""
import threading

import numpy as np

from convshard import LoopbackCluster, TrainConfig, custom_net, handshake_and_balance, master_train
from convshard.data import synthetic_cifar

spec = custom_net(16, 32, (3, 16, 16), 5, 10, name="demo")
data = synthetic_cifar(256, seed=1)
images = data.images[:, :, :16, :16]
cfg = TrainConfig(batch=32, epochs=2, lr=0.05, seed=1)

local = master_train(spec, images, data.labels, cfg)

reported = {"convshard-worker1": 1.0, "convshard-worker2": 2.0, "convshard-worker3": 4.0}


def fake_bench(_spec):
    return reported[threading.current_thread().name]


with LoopbackCluster(3, benchmark=fake_bench) as master:
    plan = handshake_and_balance(master, spec, cfg.batch, master_seconds=1.0)
    dist = master_train(spec, images, data.labels, cfg, master=master)

print("weights per device:", [round(w, 3) for w in plan.weights])
print("kernels per device, layer 0:", [s.count for s in plan.layer(0).kernels])
print("kernels per device, layer 1:", [s.count for s in plan.layer(1).kernels])
same = all(np.array_equal(local.params[k], dist.params[k]) for k in local.params)
print("bitwise identical parameters:", same)
print(f"loss {dist.rows[0].loss:.3f} -> {dist.rows[-1].loss:.3f}")
for row in dist.rows[:3]:
    print(f"batch {row.batchIdx}: comm {row.commS * 1e3:.1f}ms conv {row.convS * 1e3:.1f}ms comp {row.compS * 1e3:.1f}ms")
print("wire bytes exchanged:", master.traffic.frame_bytes())
