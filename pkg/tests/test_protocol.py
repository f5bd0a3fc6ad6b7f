import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convshard.balance import BenchSpec
from convshard.errors import CorruptionError, IncompleteFrameError, MessageSizeError, ProtocolError
from convshard.protocol import (
    HEADER_SIZE,
    AllOk,
    BenchReport,
    BenchRequest,
    ConvResult,
    ConvTask,
    Direction,
    FrameReader,
    Hello,
    MsgType,
    TrainOver,
    decode_frame,
    decode_message,
    encode_message,
    recv_message,
    send_message,
)
from convshard.transport import loopback_pair

from msgs import messages

# forward task: 1x1x2x2 zero input, one 1x1x1x1 zero kernel, no extra tensor
GOLDEN_FORWARD_TASK = bytes.fromhex(
    "43534831"  # magic
    "04"  # type: ConvTask
    "6100000000000000"  # payload length 97
    "00000000"  # layer ordinal
    "00"  # direction: forward
    "01000000010000000200000002000000" + "00" * 32  # input dims + 4 doubles
    + "01000000010000000100000001000000" + "00" * 8  # kernel dims + 1 double
    + "01000000"  # numMaps
    + "00" * 16  # empty extra tensor
)


def test_golden_forward_task_bytes():
    task = ConvTask(0, Direction.FORWARD, np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 1, 1)))
    data = encode_message(task)
    assert len(data) == 110
    assert data == GOLDEN_FORWARD_TASK
    assert decode_message(GOLDEN_FORWARD_TASK) == task


def test_all_ok_is_a_bare_header():
    assert encode_message(AllOk()) == b"CSH1\x06" + bytes(8)
    assert len(encode_message(TrainOver())) == HEADER_SIZE


def test_bench_report_is_little_endian_double():
    assert encode_message(BenchReport(1.5))[HEADER_SIZE:] == struct.pack("<d", 1.5)


@settings(max_examples=300, deadline=None)
@given(messages)
def test_round_trip(msg):
    data = encode_message(msg)
    out, end = decode_frame(data)
    assert end == len(data)
    assert out == msg
    assert type(out) is type(msg)


@settings(max_examples=100, deadline=None)
@given(st.lists(messages, min_size=1, max_size=6), st.data())
def test_reassembly_at_random_split_points(msgs, data):
    stream = b"".join(encode_message(m) for m in msgs)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(stream)), max_size=10)))
    reader = FrameReader()
    got = []
    prev = 0
    for c in cuts + [len(stream)]:
        got += reader.feed(stream[prev:c])
        prev = c
    assert got == msgs
    assert reader.pending == 0


def test_byte_at_a_time_feed():
    msg = ConvResult(3, Direction.BACKWARD_KERNEL, np.arange(24.0).reshape(2, 3, 2, 2))
    data = encode_message(msg)
    reader = FrameReader()
    out = []
    for i in range(len(data)):
        out += reader.feed(data[i : i + 1])
        if i < len(data) - 1:
            assert out == []
    assert out == [msg]


def test_truncated_frame_is_incomplete_not_corrupt():
    data = encode_message(BenchReport(2.0))
    for n in range(len(data)):
        with pytest.raises(IncompleteFrameError):
            decode_frame(data[:n])


def test_bad_magic_is_reported_early():
    with pytest.raises(ProtocolError):
        decode_frame(b"XS")
    reader = FrameReader()
    with pytest.raises(ProtocolError):
        reader.feed(b"CSH2" + bytes(9))
    with pytest.raises(ProtocolError):
        reader.feed(encode_message(AllOk()))  # reader stays poisoned


def test_frames_before_a_bad_one_are_kept_on_the_error():
    reader = FrameReader()
    with pytest.raises(ProtocolError) as err:
        reader.feed(encode_message(AllOk()) + b"JUNKJUNKJUNKJ")
    assert err.value.decoded == [AllOk()]


def test_unknown_type_and_oversized_length():
    with pytest.raises(ProtocolError):
        decode_frame(b"CSH1\x09" + bytes(8))
    with pytest.raises(ProtocolError):
        decode_frame(b"CSH1\x04" + struct.pack("<Q", 2**41))


def test_dims_that_overrun_the_payload_are_corruption():
    payload = struct.pack("<IB", 0, 0) + struct.pack("<4I", 1000, 1000, 1000, 1000)
    frame = b"CSH1\x04" + struct.pack("<Q", len(payload)) + payload
    with pytest.raises(CorruptionError):
        decode_frame(frame)


def test_mixed_zero_dims_are_corruption():
    payload = struct.pack("<IB", 0, 0) + struct.pack("<4I", 0, 1, 0, 0)
    frame = b"CSH1\x05" + struct.pack("<Q", len(payload)) + payload
    with pytest.raises(CorruptionError):
        decode_frame(frame)


def test_num_maps_must_match_kernel_count():
    data = bytearray(GOLDEN_FORWARD_TASK)
    data[HEADER_SIZE + 5 + 48 + 24] = 2  # numMaps low byte
    with pytest.raises(CorruptionError):
        decode_frame(bytes(data))


def test_trailing_payload_bytes_are_corruption():
    frame = b"CSH1\x06" + struct.pack("<Q", 1) + b"\x00"
    with pytest.raises(CorruptionError):
        decode_frame(frame)


def test_invalid_bench_request_is_corruption():
    payload = struct.pack("<4I", 1, 3, 4, 4) + struct.pack("<4I", 1, 2, 3, 3) + struct.pack("<II", 1, 0)
    with pytest.raises(CorruptionError):
        decode_frame(b"CSH1\x02" + struct.pack("<Q", len(payload)) + payload)


def test_bad_utf8_in_hello_is_corruption():
    payload = struct.pack("<BH", 1, 2) + b"\xff\xfe"
    with pytest.raises(CorruptionError):
        decode_frame(b"CSH1\x01" + struct.pack("<Q", len(payload)) + payload)


def test_non_4d_tensor_cannot_be_encoded():
    with pytest.raises(ProtocolError):
        encode_message(ConvResult(0, 0, np.zeros((2, 2))))


def test_oversized_payload_is_refused(monkeypatch):
    import convshard.protocol as P

    monkeypatch.setattr(P, "MAX_PAYLOAD", 10)
    with pytest.raises(MessageSizeError):
        encode_message(ConvResult(0, 0, np.zeros((1, 1, 1, 2))))


@settings(max_examples=300, deadline=None)
@given(messages, st.data())
def test_fuzzed_frames_never_yield_partial_messages(msg, data):
    frame = bytearray(encode_message(msg))
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(frame) - 1))
        frame[i] = data.draw(st.integers(0, 255))
    try:
        out, end = decode_frame(bytes(frame))
    except ProtocolError:
        return
    # a mutation that still parses must yield a complete, self-consistent message
    assert end == len(frame)
    assert encode_message(out) == bytes(frame[:end])


def test_stream_helpers_over_loopback():
    a, b = loopback_pair()
    msgs = [Hello("x"), BenchRequest(BenchSpec((1, 1, 4, 4), (1, 1, 2, 2))), AllOk()]
    total = sum(send_message(a, m) for m in msgs)
    assert total == sum(len(encode_message(m)) for m in msgs)
    assert [recv_message(b) for _ in msgs] == msgs


def test_message_types_are_numbered_one_to_seven():
    assert [t.value for t in MsgType] == list(range(1, 8))
