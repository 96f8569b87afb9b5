"""Binary tensor container used for model checkpoints and pinned fixtures.

Layout (all integers little-endian u32, floats little-endian float32):

    magic "DNQCKPT1"
    repeat until EOF:
        name_len, name (UTF-8), rank, dims[rank], data[prod(dims)]

The format is byte-exact across platforms; identical tensors always produce
identical files.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

MAGIC = b"DNQCKPT1"


class CheckpointError(IOError):
    """Corrupt or mismatched checkpoint data."""


def dump_tensors(named: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_tensors(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count, f"tensor {name!r}"), dtype="<f4")
        out[name] = data.reshape(dims).astype(np.float32)
    return out


def save(path, named: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(dump_tensors(named))


def load(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return parse_tensors(f.read())


def split_f64(x: np.ndarray) -> Dict[str, np.ndarray]:
    """Represent a float64 array as a hi/lo float32 pair (double-float).

    hi = f32(x), lo = f32(x - hi); hi + lo recovers x to ~2^-48 relative,
    which lets float64 state ride inside the float32-only container without
    breaking bit-exact resume.
    """
    hi = x.astype(np.float32)
    lo = (x - hi.astype(np.float64)).astype(np.float32)
    return {"hi": hi, "lo": lo}


def join_f64(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    return hi.astype(np.float64) + lo.astype(np.float64)
