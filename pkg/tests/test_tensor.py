import io

import numpy as np
import pytest

from invda.core import Tensor, TensorError
from invda.core.container import (ContainerError, read_metadata, read_named_tensors,
                                  read_tensor, write_metadata, write_named_tensors,
                                  write_tensor)


def test_shape_matches_data():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.size == 4
    assert t.data.dtype == np.float64


def test_rejects_non_finite():
    with pytest.raises(TensorError):
        Tensor([1.0, np.nan])
    with pytest.raises(TensorError):
        Tensor([np.inf, 0.0])


def test_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_serialization_round_trip_bitwise():
    rng = np.random.default_rng(7)
    arr = rng.normal(size=(3, 5, 2))
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    back = read_tensor(buf)
    assert back.shape == (3, 5, 2)
    assert back.data.tobytes() == arr.tobytes()


def test_serialization_header():
    buf = io.BytesIO()
    write_tensor(buf, np.zeros((2, 3)))
    raw = buf.getvalue()
    assert raw[:4] == b"IDA1"
    # rank then extents, little-endian u64
    assert int.from_bytes(raw[4:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 2
    assert int.from_bytes(raw[20:28], "little") == 3


def test_bad_magic_rejected():
    buf = io.BytesIO(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ContainerError):
        read_tensor(buf)


def test_truncated_rejected():
    buf = io.BytesIO()
    write_tensor(buf, np.ones(10))
    raw = buf.getvalue()[:-8]
    with pytest.raises(ContainerError):
        read_tensor(io.BytesIO(raw))


def test_named_tensors_and_metadata():
    buf = io.BytesIO()
    write_metadata(buf, {"kind": "test", "n": 3})
    write_named_tensors(buf, {"a": np.arange(4.0), "b": np.eye(2)})
    buf.seek(0)
    assert read_metadata(buf) == {"kind": "test", "n": 3}
    named = read_named_tensors(buf)
    assert set(named) == {"a", "b"}
    np.testing.assert_array_equal(named["a"].data, np.arange(4.0))
