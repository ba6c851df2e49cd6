"""Binary tensor container shared by model, optimizer and projection checkpoints.

Layout (little-endian)::

    b"GEMS"  u32 version  u64 config_len  config (UTF-8 JSON)
    repeated until EOF:
        u32 name_len  name (UTF-8)  u32 rank  u64 dims[rank]  f64 data (row-major)

Config JSON is written with sorted keys, so equal inputs give equal bytes.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedFile

MAGIC = b"GEMS"
VERSION = 1


def dumps(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(cfg)))
    buf.write(cfg)
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise MalformedFile("missing GEMS magic bytes")
    try:
        version, cfg_len = struct.unpack_from("<IQ", view, 4)
        if version != VERSION:
            raise MalformedFile(f"unsupported container version {version}")
        pos = 16
        config = json.loads(bytes(view[pos:pos + cfg_len]).decode("utf-8"))
        pos += cfg_len
        tensors: dict[str, np.ndarray] = {}
        while pos < len(view):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 8 * count > len(view):
                raise MalformedFile(f"tensor {name!r} truncated")
            tensors[name] = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"corrupt container: {exc}") from None
    return config, tensors


def save(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
