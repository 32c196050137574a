import numpy as np
import pytest

from ilora.ntf import NtfError, ntf_bytes, ntf_from_bytes, read_ntf, write_ntf


def test_round_trip_f32(tmp_path):
    arr = np.random.default_rng(0).normal(size=(5, 7, 3)).astype(np.float32)
    path = tmp_path / "a.ntf"
    write_ntf(path, arr)
    back = read_ntf(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_round_trip_u8_mask(tmp_path):
    mask = np.random.default_rng(1).random((6, 6)) > 0.5
    path = tmp_path / "m.ntf"
    write_ntf(path, mask)
    back = read_ntf(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back.astype(bool), mask)


def test_header_layout(tmp_path):
    arr = np.zeros((2, 3), dtype=np.float32)
    path = tmp_path / "h.ntf"
    write_ntf(path, arr)
    blob = path.read_bytes()
    assert blob[:4] == b"NTF1"
    assert blob[4] == 1  # f32 code
    assert blob[5] == 2  # rank
    assert int.from_bytes(blob[6:10], "little") == 2
    assert int.from_bytes(blob[10:14], "little") == 3
    assert len(blob) == 14 + 6 * 4


def test_truncated_rejected(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "t.ntf"
    write_ntf(path, arr)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(NtfError):
        read_ntf(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "b.ntf"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(NtfError):
        read_ntf(path)


def test_embedded_records():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array([1, 2, 255], dtype=np.uint8)
    blob = ntf_bytes(a) + ntf_bytes(b)
    a2, off = ntf_from_bytes(blob, 0)
    b2, end = ntf_from_bytes(blob, off)
    assert np.array_equal(a2, a)
    assert np.array_equal(b2, b)
    assert end == len(blob)
