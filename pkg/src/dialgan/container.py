"""``DGW1`` tensor container shared by feature weights and checkpoints.

Little-endian layout::

    b"DGW1" | u32 count | count * (u16 name_len, name utf-8, u8 ndim,
                                   u32 dims[ndim], f32 data[prod(dims)])

JSON metadata rides along as a 1-D record whose values are the UTF-8 byte
codes of the document (exact in f32).
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DGW1"
METADATA = "metadata.json"


class ContainerError(ValueError):
    pass


def dumps(records) -> bytes:
    buf = io.BytesIO()
    items = list(records.items()) if isinstance(records, dict) else list(records)
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic, expected DGW1")
    (count,) = struct.unpack("<I", take(4))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last record")
    return out


def save(path, records) -> None:
    Path(path).write_bytes(dumps(records))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def encode_metadata(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_metadata(arr: np.ndarray) -> dict:
    return json.loads(bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8"))
