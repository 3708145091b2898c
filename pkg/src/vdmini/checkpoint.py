"""VDMK checkpoint files.

Layout: magic "VDMK", format version (u32 LE), tensor count (u32 LE), a
directory of (name length u32, UTF-8 name, rank u64, dims u64..., payload
byte offset u64), the little-endian float64 payloads, and a trailing CRC32
(u32 LE) of everything before it. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"VDMK"
VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    names = sorted(params)
    directory = bytearray()
    payload = bytearray()
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        directory += struct.pack("<I", len(raw)) + raw
        directory += struct.pack("<Q", data.ndim)
        directory += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
        directory += struct.pack("<Q", len(payload))
        payload += data.tobytes()
    body = MAGIC + struct.pack("<II", VERSION, len(names)) + bytes(directory) + bytes(payload)
    blob = body + struct.pack("<I", zlib.crc32(body))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, Tensor]:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", body, pos) if rank else ()
            pos += 8 * rank
            (offset,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            entries.append((name, dims, offset))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated directory") from exc
    params = {}
    for name, dims, offset in entries:
        n = int(np.prod(dims)) if dims else 1
        start = pos + offset
        end = start + 8 * n
        if end > len(body):
            raise CheckpointError(f"{path}: payload for {name!r} out of bounds")
        arr = np.frombuffer(body[start:end], dtype="<f8").reshape(dims)
        params[name] = Tensor(arr, requires_grad=True)
    return params
