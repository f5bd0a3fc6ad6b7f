"""Binary checkpoints of a training run.

Layout (little-endian)::

    b"CSCK"  u32 version
    u32 meta_len   meta_len bytes of UTF-8 JSON (network spec, counters, RNG state)
    u32 count      then per array:
        u16 name_len  name   u32 ndim   ndim x u64 dims   prod(dims) x f64
"""
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .network import NetworkSpec

MAGIC = b"CSCK"
VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    epoch: int = 0
    batch: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.spec == other.spec
            and (self.epoch, self.batch, self.rng_state, self.extra)
            == (other.epoch, other.batch, other.rng_state, other.extra)
            and self.params.keys() == other.params.keys()
            and all(
                self.params[k].shape == other.params[k].shape
                and self.params[k].tobytes() == other.params[k].tobytes()
                for k in self.params
            )
        )


def dumps(ck):
    meta = json.dumps(
        {
            "netSpec": ck.spec.to_dict(),
            "epoch": ck.epoch,
            "batch": ck.batch,
            "rngState": ck.rng_state,
            "extra": ck.extra,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ck.params))]
    for name in sorted(ck.params):
        a = np.ascontiguousarray(ck.params[name], dtype="<f8")
        key = name.encode("utf-8")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<I", a.ndim), struct.pack(f"<{a.ndim}Q", *a.shape)]
        parts.append(a.tobytes())
    return b"".join(parts)


def loads(buf, source="<bytes>"):
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise DataError(f"{source}: checkpoint truncated at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = bytes(take(klen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = math.prod(dims)
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(view):
        raise DataError(f"{source}: {len(view) - pos} trailing bytes")
    return Checkpoint(
        NetworkSpec.from_dict(meta["netSpec"]),
        params,
        meta["epoch"],
        meta["batch"],
        meta["rngState"],
        meta.get("extra", {}),
    )


def save_checkpoint(path, ck):
    """Write atomically: a crash mid-write leaves the previous checkpoint intact."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(dumps(ck))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data, str(path))
