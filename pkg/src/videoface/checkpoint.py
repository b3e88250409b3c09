"""Weight checkpoint file format.

Layout: the magic string "TBEW1", then one record per array, sorted by name:
uint16 LE name length, UTF-8 name bytes, uint8 rank, rank x uint32 LE dims,
then the float32 LE payload in row-major order. Records are read until EOF.
Round-trips are bit-exact, so identical training runs produce identical files.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"TBEW1"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise CheckpointError(f"parameter name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"rank {arr.ndim} too large for '{name}'")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_arrays(path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a weight checkpoint")
        prev = None
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CheckpointError("truncated checkpoint while reading name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if prev is not None and name <= prev:
                raise CheckpointError(f"records out of order: {name!r} after {prev!r}")
            prev = name
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            count = 1
            for d in dims:
                count *= d
            payload = _read_exact(fh, 4 * count, f"payload of '{name}'")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return arrays
