import io

import numpy as np
import pytest

from src.config import CorruptFileError
from src.tensor_io import HEADER, load_tensor, read_tensor, save_tensor, write_tensor


@pytest.mark.parametrize("array", [
    np.arange(12, dtype=np.float32).reshape(3, 4),
    np.linspace(0, 1, 5),
    np.array([[1, -2], [3, 4]], dtype=np.int32),
    np.array([0, 255], dtype=np.uint8),
    np.array(7, dtype=np.int64),
])
def test_round_trip_keeps_dtype_and_shape(tmp_path, array):
    save_tensor(tmp_path / "t.rmt", array)
    loaded = load_tensor(tmp_path / "t.rmt")
    assert loaded.dtype == array.dtype
    assert loaded.shape == array.shape
    assert np.array_equal(loaded, array)


def test_header_layout():
    buffer = io.BytesIO()
    write_tensor(buffer, np.zeros((2, 3), dtype=np.float32))
    raw = buffer.getvalue()
    assert len(raw) == HEADER.size + 24
    assert raw[:4] == b"RMTD"
    magic, version, code, rank, *dims = HEADER.unpack(raw[:HEADER.size])
    assert (version, code, rank, dims) == (1, 1, 2, [2, 3, 0, 0, 0, 0])


def test_unsupported_dtype():
    with pytest.raises(ValueError, match="Unsupported tensor dtype"):
        write_tensor(io.BytesIO(), np.zeros(2, dtype=np.complex64))


@pytest.mark.parametrize("mutate, message", [
    (lambda raw: raw[:10], "truncated tensor header"),
    (lambda raw: raw[:-4], "truncated payload"),
    (lambda raw: b"XXXX" + raw[4:], "bad magic"),
    (lambda raw: raw[:4] + b"\x09\x00" + raw[6:], "version"),
    (lambda raw: raw[:6] + b"\x63" + raw[7:], "dtype code"),
])
def test_corrupt_records(mutate, message):
    buffer = io.BytesIO()
    write_tensor(buffer, np.ones((2, 2), dtype=np.float32))
    with pytest.raises(CorruptFileError, match=message):
        read_tensor(io.BytesIO(mutate(buffer.getvalue())))


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.rmt"
    save_tensor(path, np.ones(3, dtype=np.float32))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CorruptFileError, match="trailing bytes"):
        load_tensor(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tensor(tmp_path / "nope.rmt")
