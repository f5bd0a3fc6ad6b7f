"""Hypothesis strategies producing every wire message type."""
import numpy as np
from hypothesis import strategies as st

from convshard.balance import BenchSpec
from convshard.protocol import (
    AllOk,
    BenchReport,
    BenchRequest,
    ConvResult,
    ConvTask,
    Direction,
    Hello,
    TrainOver,
    empty_tensor,
)

_floats = st.floats(allow_nan=True, allow_infinity=True, width=64)


@st.composite
def tensors(draw, allow_empty=True, max_side=3):
    if allow_empty and draw(st.booleans()):
        return empty_tensor()
    dims = draw(st.tuples(*[st.integers(1, max_side)] * 4))
    data = draw(st.lists(_floats, min_size=int(np.prod(dims)), max_size=int(np.prod(dims))))
    return np.array(data, dtype=np.float64).reshape(dims)


@st.composite
def bench_specs(draw):
    n, c = draw(st.integers(1, 64)), draw(st.integers(1, 8))
    h, w = draw(st.integers(1, 40)), draw(st.integers(1, 40))
    return BenchSpec((n, c, h, w), (draw(st.integers(1, 600)), c, draw(st.integers(1, h)), draw(st.integers(1, w))),
                     draw(st.integers(1, 10)), draw(st.integers(0, 3)))


@st.composite
def conv_tasks(draw):
    kernels = draw(tensors(allow_empty=False))
    return ConvTask(
        draw(st.integers(0, 2**32 - 1)),
        draw(st.sampled_from(list(Direction))),
        draw(tensors()),
        kernels,
        draw(tensors()),
    )


messages = st.one_of(
    st.builds(Hello, st.text(max_size=20), st.integers(0, 255)),
    st.builds(BenchRequest, bench_specs()),
    st.builds(BenchReport, _floats),
    conv_tasks(),
    st.builds(ConvResult, st.integers(0, 2**32 - 1), st.sampled_from(list(Direction)), tensors()),
    st.just(AllOk()),
    st.just(TrainOver()),
)
