import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripix.tensor import Tensor
from tripix.tensorio import (
    TensorFormatError,
    read_pgm,
    read_ppm,
    read_tensor,
    write_pgm,
    write_ppm,
    write_tensor,
)


def test_roundtrip_bitwise(tmp_path, rng):
    t = Tensor(rng.standard_normal((3, 4, 5)))
    path = tmp_path / "t.spvt"
    write_tensor(path, t)
    back = read_tensor(path)
    assert back.dtype == t.dtype
    np.testing.assert_array_equal(back.data, t.data)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(1, 6), min_size=0, max_size=4),
    st.sampled_from(["float32", "float64"]),
    st.integers(0, 10**6),
)
def test_roundtrip_property(tmp_path_factory, dims, dtype, seed):
    arr = np.random.default_rng(seed).standard_normal(tuple(dims)).astype(dtype)
    path = tmp_path_factory.mktemp("io") / "t.spvt"
    write_tensor(path, Tensor(arr, dtype=dtype))
    back = read_tensor(path)
    assert back.data.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(back.data, arr)


def test_truncated_payload_names_byte_counts(tmp_path, rng):
    path = tmp_path / "t.spvt"
    write_tensor(path, Tensor(rng.standard_normal((2, 3))))
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(TensorFormatError) as err:
        read_tensor(path)
    msg = str(err.value)
    assert str(len(blob)) in msg and str(len(blob) - 5) in msg


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "t.spvt"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(TensorFormatError) as err:
        read_tensor(path)
    assert err.value.offset == 0


def test_dim_overflow_rejected_before_allocation(tmp_path):
    import struct

    path = tmp_path / "t.spvt"
    # header claims 2^32-1 x 2^32-1 x 2: astronomically more than the payload
    header = b"SPVT" + struct.pack("<BBB", 1, 2, 3)
    header += struct.pack("<3I", 2**32 - 1, 2**32 - 1, 2)
    path.write_bytes(header + b"\x00" * 16)
    with pytest.raises(TensorFormatError) as err:
        read_tensor(path)
    assert "overflow" in str(err.value)


def test_unknown_dtype_code(tmp_path):
    import struct

    path = tmp_path / "t.spvt"
    path.write_bytes(b"SPVT" + struct.pack("<BBB", 1, 7, 0))
    with pytest.raises(TensorFormatError):
        read_tensor(path)


def test_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 9)).astype(np.uint8)
    path = tmp_path / "m.pgm"
    write_pgm(path, img)
    np.testing.assert_array_equal(read_pgm(path), img)


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    payload = bytes(range(6))
    path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
    img = read_pgm(path)
    assert img.shape == (2, 3)
    assert img.tobytes() == payload


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 5, 4)).astype(np.uint8)
    path = tmp_path / "f.ppm"
    write_ppm(path, img)
    np.testing.assert_array_equal(read_ppm(path), img)


def test_pgm_truncated(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(ValueError):
        read_pgm(path)
