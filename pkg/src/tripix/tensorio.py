"""Binary tensor files and PGM/PPM images.

Tensor file layout: magic ``SPVT``, version byte (1), dtype code byte
(1 = f32, 2 = f64), ndim byte, ndim little-endian u32 dims, then the
row-major little-endian payload. Round trips are bit-exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"SPVT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

# Refuse dim products beyond this before allocating anything.
MAX_ELEMENTS = 1 << 40


class TensorFormatError(ValueError):
    """Malformed tensor file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def write_tensor(path, t: Tensor) -> None:
    arr = t.data if isinstance(t, Tensor) else Tensor(t).data
    code = _DTYPE_CODES[arr.dtype]
    if arr.ndim > 255:
        raise ValueError(f"ndim {arr.ndim} exceeds format limit of 255")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_tensor(path) -> Tensor:
    blob = Path(path).read_bytes()
    if len(blob) < 7:
        raise TensorFormatError("file too short for header", len(blob))
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", 5)
    dims_end = 7 + 4 * ndim
    if len(blob) < dims_end:
        raise TensorFormatError(
            f"truncated dims: expected {dims_end} header bytes, file has {len(blob)}",
            len(blob),
        )
    dims = struct.unpack_from(f"<{ndim}I", blob, 7) if ndim else ()
    n = 1
    for d in dims:
        n *= d
    if n > MAX_ELEMENTS:
        raise TensorFormatError(f"dims {dims} overflow element limit {MAX_ELEMENTS}", 7)
    dtype = _CODE_DTYPES[code]
    expected = dims_end + n * dtype.itemsize
    if len(blob) != expected:
        raise TensorFormatError(
            f"payload size mismatch: expected {expected} bytes total, "
            f"file has {len(blob)}",
            min(len(blob), expected),
        )
    arr = np.frombuffer(blob, dtype=dtype, count=n, offset=dims_end).reshape(dims)
    return Tensor(arr.astype(dtype.newbyteorder("=")))


def _read_netpbm_header(blob: bytes, magic: bytes, path):
    """Parse 'P5'/'P6' header tokens, skipping whitespace and # comments."""
    if blob[:2] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {blob[:2]!r}")
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError(f"{path}: truncated header")
        tokens.append(int(blob[start:i]))
    i += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, i


def write_pgm(path, img: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM (P5, maxval 255)."""
    a = np.ascontiguousarray(img, dtype=np.uint8)
    if a.ndim != 2:
        raise ValueError(f"PGM image must be 2-d, got shape {a.shape}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        f.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    width, height, offset = _read_netpbm_header(blob, b"P5", path)
    need = width * height
    data = blob[offset : offset + need]
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (3, H, W) uint8 array as binary PPM (P6, maxval 255)."""
    a = np.ascontiguousarray(img, dtype=np.uint8)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"PPM image must be (3, H, W), got shape {a.shape}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (a.shape[2], a.shape[1]))
        f.write(np.moveaxis(a, 0, 2).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    width, height, offset = _read_netpbm_header(blob, b"P6", path)
    need = width * height * 3
    data = blob[offset : offset + need]
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} pixel bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return np.moveaxis(arr, 2, 0).copy()
