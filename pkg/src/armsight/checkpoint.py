"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"RPNN"  u32 version
    repeated until EOF:
        u32 name_length, name (utf-8), u8 dtype tag, u32 ndim, u32 * ndim shape,
        raw little-endian values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RPNN"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_FOR = {v.str: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for name, arr in params.items():
            arr = np.asarray(arr)
            le = arr.dtype.newbyteorder("<")
            if le.str not in TAG_FOR:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<BI", TAG_FOR[le.str], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an RPNN checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    params = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            tag, ndim = struct.unpack_from("<BI", data, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated block {name!r}")
            params[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return params
