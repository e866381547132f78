"""Binary parameter checkpoints.

Layout, all little-endian::

    b"SISW" | u32 version | u32 tensor count
    per tensor: u32 name length | utf-8 name | u32 rank | u32 dims[rank] | f32 data
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SISW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(state):
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads_checkpoint(buf):
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a SISW checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    state = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            if len(name.encode()) != n:
                raise CheckpointError("truncated checkpoint")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CheckpointError("truncated checkpoint")
            state[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return state


def save_checkpoint(path, state):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(state))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
