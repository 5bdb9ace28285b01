"""Bit-exact on-disk tensor format.

Layout: ``b"LPST" | u32 version | u8 dtype code | u32 rank | rank x u64
extents | raw little-endian payload``. Supported dtypes: float32/float64
(feature maps), int32/int64 (label masks).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LPST"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1,
          np.dtype("<i4"): 2, np.dtype("<i8"): 3}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class TensorIOError(RuntimeError):
    pass


def save_tensor(path, arr: np.ndarray):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise TensorIOError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<B", _CODES[dt]))
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 13 or raw[:4] != MAGIC:
        raise TensorIOError(f"{path}: not a tensor file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise TensorIOError(f"{path}: unsupported version {version}")
    (code,) = struct.unpack_from("<B", raw, 8)
    if code not in _DTYPES:
        raise TensorIOError(f"{path}: unknown dtype code {code}")
    (rank,) = struct.unpack_from("<I", raw, 9)
    header_end = 13 + 8 * rank
    if len(raw) < header_end:
        raise TensorIOError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q" if rank else "", raw, 13) if rank else ()
    dt = _DTYPES[code]
    count = 1
    for extent in shape:
        count *= extent
    expected = header_end + count * dt.itemsize
    if len(raw) < expected:
        raise TensorIOError(f"{path}: truncated payload "
                            f"({len(raw) - header_end} of {count * dt.itemsize} bytes)")
    if len(raw) > expected:
        raise TensorIOError(f"{path}: trailing bytes after payload")
    return np.frombuffer(raw[header_end:], dtype=dt).reshape(shape).copy()
