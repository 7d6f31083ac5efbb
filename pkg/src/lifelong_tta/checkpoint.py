"""Binary checkpoint of named float64 arrays.

Layout: magic ``PTTA``, version u32, entry count u32, then per entry a
u16-length UTF-8 name, rank u8, one u32 extent per axis, and the row-major
float64 payload. All integers and floats are little-endian. Readers reject
unknown magic or versions.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTTA"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint data."""


def write_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays in the given order."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, values in entries.items():
        arr = np.ascontiguousarray(values, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Read named arrays, preserving write order."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cursor = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, cursor)
            cursor += 2
            name = blob[cursor : cursor + name_len].decode("utf-8")
            cursor += name_len
            (rank,) = struct.unpack_from("<B", blob, cursor)
            cursor += 1
            shape = struct.unpack_from(f"<{rank}I", blob, cursor)
            cursor += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if len(blob) - cursor < 8 * size:
                raise CheckpointError("truncated checkpoint payload")
            payload = np.frombuffer(blob, dtype="<f8", count=size, offset=cursor)
            cursor += 8 * size
        except struct.error as exc:
            raise CheckpointError("truncated checkpoint") from exc
        entries[name] = payload.astype(np.float64).reshape(shape)
    if cursor != len(blob):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return entries
