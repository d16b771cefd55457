import numpy as np
import pytest

from occudet import uvtf
from occudet.rng import Rng


def test_same_seed_same_stream_bits():
    a = Rng(42).stream(3).generator().standard_normal(16)
    b = Rng(42).stream(3).generator().standard_normal(16)
    np.testing.assert_array_equal(a, b)


def test_streams_independent_and_order_insensitive():
    r = Rng(7)
    # drawing from one stream does not disturb another
    s1 = r.stream(1).generator()
    _ = s1.standard_normal(100)
    a = r.stream(2).generator().standard_normal(8)
    b = Rng(7).stream(2).generator().standard_normal(8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, r.stream(3).generator().standard_normal(8))


def test_nested_stream_derivation():
    a = Rng(1).stream(2).stream(3).generator().standard_normal(4)
    b = Rng(1).stream(2).stream(3).generator().standard_normal(4)
    c = Rng(1).stream(3).stream(2).generator().standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("arr", [
    np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7,
    np.arange(12, dtype=np.uint16).reshape(3, 4),
    (np.arange(8, dtype=np.uint8) * 3).reshape(2, 2, 2, 1),
])
def test_uvtf_roundtrip(tmp_path, arr):
    path = tmp_path / "t.uvtf"
    uvtf.write_tensor(path, arr)
    back = uvtf.read_tensor(path)
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


def test_uvtf_header_layout(tmp_path):
    path = tmp_path / "t.uvtf"
    uvtf.write_tensor(path, np.zeros((2, 3), dtype=np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"UVTF"
    assert raw[4:8] == (1).to_bytes(4, "little")       # version
    assert raw[8] == 0                                 # f32 dtype code
    assert raw[9] == 2                                 # ndim
    dims = np.frombuffer(raw[10:26], dtype="<u8")
    assert tuple(dims) == (2, 3)
    assert len(raw) == 26 + 2 * 3 * 4


def test_uvtf_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.uvtf"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(uvtf.UvtfError):
        uvtf.read_tensor(path)


def test_uvtf_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(uvtf.UvtfError):
        uvtf.write_tensor(tmp_path / "x.uvtf", np.zeros(3, dtype=np.int64))


def test_uvtf_truncated_payload(tmp_path):
    path = tmp_path / "t.uvtf"
    uvtf.write_tensor(path, np.zeros(8, dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(uvtf.UvtfError):
        uvtf.read_tensor(path)
