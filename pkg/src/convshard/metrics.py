"""Per-batch time accounting and the metrics CSV.

A :class:`PhaseClock` attributes every instant between ``start`` and ``stop``
to exactly one phase (``comm``, ``conv`` or ``comp``), so the three totals sum
to the measured wall time by construction.
"""
import csv
import time
from contextlib import contextmanager
from dataclasses import astuple, dataclass, fields

PHASES = ("comm", "conv", "comp")


class PhaseClock:
    def __init__(self, timer=time.perf_counter):
        self._timer = timer
        self.totals = dict.fromkeys(PHASES, 0.0)
        self.current = None
        self._t = None
        self._t0 = None
        self.wall = 0.0

    def start(self, phase="comp"):
        self._check(phase)
        self._t0 = self._t = self._timer()
        self.current = phase
        self.totals = dict.fromkeys(PHASES, 0.0)

    def switch(self, phase):
        """Charge the time since the last switch to the current phase, then enter ``phase``.

        Returns the phase that was active.
        """
        self._check(phase)
        if self.current is None:
            raise RuntimeError("clock not started")
        now = self._timer()
        self.totals[self.current] += now - self._t
        self._t = now
        previous, self.current = self.current, phase
        return previous

    @contextmanager
    def phase(self, name):
        if self.current is None:
            yield
            return
        previous = self.switch(name)
        try:
            yield
        finally:
            self.switch(previous)

    def stop(self):
        """Close the current phase; returns ``(totals, wall_seconds)``."""
        now = self._timer()
        self.totals[self.current] += now - self._t
        self.wall = now - self._t0
        self.current = None
        return dict(self.totals), self.wall

    @staticmethod
    def _check(phase):
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")


@dataclass
class MetricsRow:
    run_id: str
    preset: str
    batch: int
    devices: int
    epoch: int
    batchIdx: int
    commS: float
    convS: float
    compS: float
    totalS: float
    loss: float
    accuracy: float


COLUMNS = [f.name for f in fields(MetricsRow)]


class MetricsWriter:
    """Appends rows to a CSV file, writing the header once."""

    def __init__(self, path):
        self.path = path
        try:
            self._fh = open(path, "w", newline="")
        except OSError as exc:
            raise OSError(f"cannot open metrics file {path}: {exc}") from exc
        self._w = csv.writer(self._fh)
        self._w.writerow(COLUMNS)

    def write(self, row):
        self._w.writerow(astuple(row))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(rows, path):
    with MetricsWriter(path) as w:
        for row in rows:
            w.write(row)


def read_metrics(path):
    with open(path, newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            kw = {}
            for f in fields(MetricsRow):
                kw[f.name] = f.type(rec[f.name]) if f.type in (int, float) else rec[f.name]
            out.append(MetricsRow(**kw))
        return out
