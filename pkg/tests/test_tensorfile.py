import numpy as np
import pytest

from sarreg.errors import ContractViolation
from sarreg.tensorfile import MAGIC, read_tensor, write_tensor


def test_float_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(0, 5, (7, 9, 2)).astype(np.float32)
    path = tmp_path / "field.sart"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_mask_round_trip_as_uint8(tmp_path):
    arr = (np.random.default_rng(1).random((12, 5)) > 0.5).astype(np.uint8)
    path = tmp_path / "mask.sart"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back, arr)


def test_header_layout(tmp_path):
    arr = np.zeros((3, 4), dtype=np.float32)
    path = tmp_path / "t.sart"
    write_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert raw[4] == 1          # version
    assert raw[5] == 1          # dtype code float32
    assert raw[6] == 2          # rank
    assert int.from_bytes(raw[7:11], "little") == 3
    assert int.from_bytes(raw[11:15], "little") == 4
    assert len(raw) == 15 + 3 * 4 * 4


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.sart"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ContractViolation):
        read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "t.sart"
    write_tensor(path, arr)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(ContractViolation):
        read_tensor(path)
