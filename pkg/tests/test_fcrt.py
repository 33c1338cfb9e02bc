import io
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fedcrfd import fcrt


def test_layout_by_hand():
    blob = fcrt.encode(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:4] == b"FCRT"
    assert struct.unpack("<IB", blob[4:9]) == (1, 2)
    assert struct.unpack("<2Q", blob[9:25]) == (1, 3)
    assert np.frombuffer(blob[25:], "<f8").tolist() == [1.0, 2.0, 3.0]


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(allow_nan=False)))
def test_round_trip(arr):
    back = fcrt.read_record(io.BytesIO(fcrt.encode(arr)))
    assert back.shape == arr.shape and np.array_equal(back, arr)


def test_concatenated_records():
    a, b = np.arange(3.0), np.ones((2, 2))
    fh = io.BytesIO(fcrt.encode(a) + fcrt.encode(b))
    assert np.array_equal(fcrt.read_record(fh), a)
    assert np.array_equal(fcrt.read_record(fh), b)


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4))
    fcrt.save(tmp_path / "a.fcrt", arr)
    assert np.array_equal(fcrt.load(tmp_path / "a.fcrt"), arr)


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-8], "payload"),
    (lambda b: b[:6], "header"),
])
def test_corruption_detected(mutate, match):
    blob = fcrt.encode(np.arange(4.0))
    with pytest.raises(fcrt.FormatError, match=match):
        fcrt.read_record(io.BytesIO(mutate(blob)))
