"""Binary parameter checkpoints.

Layout: magic "MSTW1", u32 record count, then per parameter
{u32 name length, utf-8 name, u32 rank, u32 dims..., float64 payload},
all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSTW1"


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict) -> None:
    items = []
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        items.append((name, arr))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"bad magic in {path!s}: {blob[:5]!r}")
    off = 5

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError("unexpected end of checkpoint payload")
        piece = blob[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims)
        out[name] = arr.astype(np.float64)
    return out
