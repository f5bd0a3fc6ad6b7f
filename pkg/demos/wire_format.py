"""Encode a few messages, split the byte stream at odd places and reassemble it."""
import numpy as np

from convshard.protocol import AllOk, ConvTask, Direction, FrameReader, Hello, encode_message

msgs = [
    Hello("laptop"),
    ConvTask(0, Direction.FORWARD, np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 1, 1))),
    AllOk(),
]
stream = b"".join(encode_message(m) for m in msgs)
print("forward task frame:", encode_message(msgs[1]).hex())
print("stream length:", len(stream))

reader = FrameReader()
out = []
for chunk in (stream[:3], stream[3:40], stream[40:41], stream[41:]):
    out += reader.feed(chunk)
print("reassembled:", [type(m).__name__ for m in out], out == msgs)
