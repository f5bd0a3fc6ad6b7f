"""Length-prefixed binary framing for master/worker traffic.

Frame layout (little-endian)::

    magic   4 bytes   b"CSH1"
    type    u8        MsgType
    length  u64       payload byte count
    payload length bytes

Float payloads are IEEE-754 float64, little-endian.  Tensors are written as
four u32 dims followed by ``prod(dims)`` doubles; an absent tensor is written
with dims ``(0, 0, 0, 0)`` and no data.
"""
import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .balance import BenchSpec
from .errors import (
    ConfigurationError,
    CorruptionError,
    IncompleteFrameError,
    MessageSizeError,
    ProtocolError,
)

MAGIC = b"CSH1"
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<4sBQ")
HEADER_SIZE = HEADER.size  # 13
MAX_PAYLOAD = 1 << 40

_DIMS = struct.Struct("<4I")
_F64 = np.dtype("<f8")


class MsgType(IntEnum):
    HELLO = 1
    BENCH_REQUEST = 2
    BENCH_REPORT = 3
    CONV_TASK = 4
    CONV_RESULT = 5
    ALL_OK = 6
    TRAIN_OVER = 7


class Direction(IntEnum):
    FORWARD = 0
    BACKWARD_DATA = 1
    BACKWARD_KERNEL = 2


def empty_tensor():
    return np.zeros((0, 0, 0, 0))


def _same_array(a, b):
    return a.shape == b.shape and a.astype(_F64).tobytes() == b.astype(_F64).tobytes()


@dataclass(frozen=True)
class Hello:
    device_name: str = ""
    protocol_version: int = PROTOCOL_VERSION
    type = MsgType.HELLO


@dataclass(frozen=True)
class BenchRequest:
    spec: BenchSpec
    type = MsgType.BENCH_REQUEST


@dataclass(frozen=True)
class BenchReport:
    elapsed_seconds: float
    type = MsgType.BENCH_REPORT

    def __eq__(self, other):
        # bitwise, so NaN payloads still round-trip equal
        return isinstance(other, BenchReport) and struct.pack("<d", self.elapsed_seconds) == struct.pack(
            "<d", other.elapsed_seconds
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ConvTask:
    """One slice of a convolution for a worker.

    ``FORWARD``: ``inputs`` (n, c, h, w), ``kernels`` (k, c, kh, kw).
    ``BACKWARD_DATA``: ``kernels`` (m, c_sub, kh, kw), ``extra`` = grad_out (n, m, oh, ow), no inputs.
    ``BACKWARD_KERNEL``: ``inputs``, ``kernels`` (k, c, kh, kw), ``extra`` = grad_out slice (n, k, oh, ow).
    """

    layer_ordinal: int
    direction: Direction
    inputs: np.ndarray
    kernels: np.ndarray
    extra: np.ndarray = None
    type = MsgType.CONV_TASK

    def __post_init__(self):
        if self.extra is None:
            object.__setattr__(self, "extra", empty_tensor())
        object.__setattr__(self, "direction", Direction(self.direction))

    @property
    def num_maps(self):
        return int(self.kernels.shape[0])

    def float_count(self):
        return int(self.inputs.size + self.kernels.size + self.extra.size)

    def __eq__(self, other):
        return (
            isinstance(other, ConvTask)
            and self.layer_ordinal == other.layer_ordinal
            and self.direction == other.direction
            and _same_array(self.inputs, other.inputs)
            and _same_array(self.kernels, other.kernels)
            and _same_array(self.extra, other.extra)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ConvResult:
    layer_ordinal: int
    direction: Direction
    output: np.ndarray
    type = MsgType.CONV_RESULT

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))

    def float_count(self):
        return int(self.output.size)

    def __eq__(self, other):
        return (
            isinstance(other, ConvResult)
            and self.layer_ordinal == other.layer_ordinal
            and self.direction == other.direction
            and _same_array(self.output, other.output)
        )

    __hash__ = None


@dataclass(frozen=True)
class AllOk:
    type = MsgType.ALL_OK


@dataclass(frozen=True)
class TrainOver:
    type = MsgType.TRAIN_OVER


# -- encoding -----------------------------------------------------------------


def _put_tensor(parts, a):
    a = np.asarray(a)
    if a.ndim != 4:
        raise ProtocolError(f"tensors on the wire must be 4-D, got shape {a.shape}")
    parts.append(_DIMS.pack(*a.shape))
    if a.size:
        parts.append(memoryview(np.ascontiguousarray(a, dtype=_F64)).cast("B"))


def _payload(msg):
    if isinstance(msg, Hello):
        name = msg.device_name.encode("utf-8")
        return [struct.pack("<BH", msg.protocol_version, len(name)), name]
    if isinstance(msg, BenchRequest):
        s = msg.spec
        return [_DIMS.pack(*s.input_shape), _DIMS.pack(*s.kernel_shape), struct.pack("<II", s.repetitions, s.warmups)]
    if isinstance(msg, BenchReport):
        return [struct.pack("<d", msg.elapsed_seconds)]
    if isinstance(msg, ConvTask):
        parts = [struct.pack("<IB", msg.layer_ordinal, msg.direction)]
        _put_tensor(parts, msg.inputs)
        _put_tensor(parts, msg.kernels)
        parts.append(struct.pack("<I", msg.num_maps))
        _put_tensor(parts, msg.extra)
        return parts
    if isinstance(msg, ConvResult):
        parts = [struct.pack("<IB", msg.layer_ordinal, msg.direction)]
        _put_tensor(parts, msg.output)
        return parts
    if isinstance(msg, (AllOk, TrainOver)):
        return []
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def _frame_parts(msg):
    parts = _payload(msg)
    length = sum(len(p) for p in parts)
    if length > MAX_PAYLOAD:
        raise MessageSizeError(f"payload of {length} bytes exceeds the {MAX_PAYLOAD}-byte limit")
    return [HEADER.pack(MAGIC, int(msg.type), length), *parts]


def encode_message(msg):
    """Serialize ``msg`` into a single frame."""
    return b"".join(_frame_parts(msg))


# -- decoding -----------------------------------------------------------------


class _Cursor:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"payload truncated: need {n} bytes at offset {self.pos} of {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def tensor(self):
        dims = self.unpack(_DIMS)
        count = math.prod(dims)
        if 0 in dims and any(dims):
            raise CorruptionError(f"tensor dims {dims} mix zero and non-zero extents")
        nbytes = count * 8
        if nbytes > len(self.buf) - self.pos:
            raise CorruptionError(f"tensor dims {dims} need {nbytes} bytes, only {len(self.buf) - self.pos} left")
        data = np.frombuffer(self.take(nbytes), dtype=_F64, count=count)
        return data.astype(np.float64, copy=False).reshape(dims)

    def finish(self):
        if self.pos != len(self.buf):
            raise CorruptionError(f"{len(self.buf) - self.pos} trailing bytes in payload")


def decode_payload(msg_type, payload):
    cur = _Cursor(payload)
    try:
        if msg_type == MsgType.HELLO:
            version, n = cur.unpack(struct.Struct("<BH"))
            msg = Hello(bytes(cur.take(n)).decode("utf-8"), version)
        elif msg_type == MsgType.BENCH_REQUEST:
            inp, ker = cur.unpack(_DIMS), cur.unpack(_DIMS)
            reps, warm = cur.unpack(struct.Struct("<II"))
            msg = BenchRequest(BenchSpec(inp, ker, reps, warm))
        elif msg_type == MsgType.BENCH_REPORT:
            (elapsed,) = cur.unpack(struct.Struct("<d"))
            msg = BenchReport(elapsed)
        elif msg_type == MsgType.CONV_TASK:
            ordinal, direction = cur.unpack(struct.Struct("<IB"))
            inputs = cur.tensor()
            kernels = cur.tensor()
            (num_maps,) = cur.unpack(struct.Struct("<I"))
            extra = cur.tensor()
            if num_maps != kernels.shape[0]:
                raise CorruptionError(f"numMaps {num_maps} != kernel count {kernels.shape[0]}")
            msg = ConvTask(ordinal, Direction(direction), inputs, kernels, extra)
        elif msg_type == MsgType.CONV_RESULT:
            ordinal, direction = cur.unpack(struct.Struct("<IB"))
            msg = ConvResult(ordinal, Direction(direction), cur.tensor())
        elif msg_type == MsgType.ALL_OK:
            msg = AllOk()
        elif msg_type == MsgType.TRAIN_OVER:
            msg = TrainOver()
        else:
            raise ProtocolError(f"unknown message type {msg_type}")
        cur.finish()
    except (UnicodeDecodeError, ConfigurationError, ValueError) as exc:
        raise CorruptionError(f"malformed {MsgType(msg_type).name} payload: {exc}") from exc
    return msg


def parse_header(header):
    """Validate a 13-byte header; returns ``(MsgType, payload_length)``."""
    magic, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload length {length} exceeds limit")
    return msg_type, length


def decode_frame(buf, offset=0):
    """Decode the frame starting at ``offset``; returns ``(message, end_offset)``.

    Raises :class:`IncompleteFrameError` when ``buf`` holds only part of the frame.
    """
    view = memoryview(buf)[offset:]
    head = bytes(view[: len(MAGIC)])
    if head != MAGIC[: len(head)]:
        raise ProtocolError(f"bad magic {head!r}")
    if len(view) < HEADER_SIZE:
        raise IncompleteFrameError(f"have {len(view)} of {HEADER_SIZE} header bytes")
    msg_type, length = parse_header(view[:HEADER_SIZE])
    end = HEADER_SIZE + length
    if len(view) < end:
        raise IncompleteFrameError(f"have {len(view)} of {end} frame bytes")
    return decode_payload(msg_type, view[HEADER_SIZE:end]), offset + end


def decode_message(buf):
    """Decode exactly one frame from the start of ``buf`` (trailing bytes are ignored)."""
    return decode_frame(buf)[0]


class FrameReader:
    """Incremental decoder for a byte stream that arrives in arbitrary chunks."""

    def __init__(self):
        self._buf = bytearray()
        self._broken = None

    def feed(self, data):
        """Append ``data``; return every message now complete, in order."""
        if self._broken is not None:
            raise self._broken
        self._buf += data
        out = []
        pos = 0
        try:
            while True:
                avail = len(self._buf) - pos
                head = bytes(self._buf[pos : pos + min(avail, len(MAGIC))])
                if head != MAGIC[: len(head)]:
                    raise ProtocolError(f"bad magic {head!r}")
                if avail < HEADER_SIZE:
                    break
                msg_type, length = parse_header(bytes(self._buf[pos : pos + HEADER_SIZE]))
                end = pos + HEADER_SIZE + length
                if len(self._buf) < end:
                    break
                # copy the payload out: decoded arrays alias their source buffer
                out.append(decode_payload(msg_type, bytes(self._buf[pos + HEADER_SIZE : end])))
                pos = end
        except ProtocolError as exc:
            # frames completed before the bad one stay available to the caller
            exc.decoded = out
            self._broken = exc
            raise
        finally:
            del self._buf[:pos]
        return out

    @property
    def pending(self):
        return len(self._buf)


# -- stream helpers -------------------------------------------------------------


def send_message(conn, msg):
    """Write one frame; returns the number of bytes sent.

    Array data is handed to the connection without an intermediate copy.
    """
    sent = 0
    for part in _frame_parts(msg):
        conn.sendall(part)
        sent += len(part)
    return sent


def recv_header(conn):
    return parse_header(conn.recv_exact(HEADER_SIZE))


def recv_body(conn, msg_type, length):
    return decode_payload(msg_type, conn.recv_exact(length))


def recv_message(conn):
    """Block until one full frame has been read from ``conn``."""
    msg_type, length = recv_header(conn)
    return recv_body(conn, msg_type, length)
