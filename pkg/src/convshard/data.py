"""CIFAR-10 binary ingestion and a seeded synthetic stand-in."""
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, IngestionError

RECORD_BYTES = 1 + 3 * 32 * 32
IMAGE_SHAPE = (3, 32, 32)
CLASSES = 10


@dataclass
class Cifar10Batch:
    images: np.ndarray  # (n, 3, 32, 32) in [0, 1]
    labels: np.ndarray  # (n,) int64 in 0..9

    def __len__(self):
        return len(self.labels)

    def take(self, start, stop):
        return Cifar10Batch(self.images[start:stop], self.labels[start:stop])


def parse_cifar10(buf, source="<bytes>"):
    """Parse records of one label byte followed by R, G and B planes of 32x32 bytes."""
    n_bytes = len(buf)
    if n_bytes == 0:
        raise IngestionError(f"{source}: empty file", offset=0)
    if n_bytes % RECORD_BYTES:
        whole = n_bytes // RECORD_BYTES
        raise IngestionError(
            f"{source}: truncated record {whole} ({n_bytes % RECORD_BYTES} of {RECORD_BYTES} bytes)",
            offset=whole * RECORD_BYTES,
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CLASSES)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{source}: record {i} (byte offset {i * RECORD_BYTES}) has label {labels[i]} > 9")
    images = raw[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float64) / 255.0
    return Cifar10Batch(images, labels)


def load_cifar10(path):
    """Load one CIFAR-10 binary file, or every ``data_batch_*.bin`` in a directory."""
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.startswith("data_batch_") and f.endswith(".bin"))
        if not files:
            raise IngestionError(f"{path}: no data_batch_*.bin files")
        parts = [load_cifar10(os.path.join(path, f)) for f in files]
        return Cifar10Batch(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    return parse_cifar10(buf, str(path))


def synthetic_cifar(n, seed=0, classes=CLASSES, noise=0.15):
    """Seeded stand-in data with learnable structure.

    Each class has a fixed random template; an image is its class template
    plus uniform noise, clipped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    templates = rng.random((classes, *IMAGE_SHAPE))
    labels = rng.integers(0, classes, n)
    images = templates[labels] + noise * (rng.random((n, *IMAGE_SHAPE)) - 0.5)
    return Cifar10Batch(np.clip(images, 0.0, 1.0), labels.astype(np.int64))
