"""Binary checkpoint format with integrity checking.

Layout: magic "MCAW", u32 format version, a sequence of named tensors
(u32 name length, UTF-8 name, u32 rank, u64 dims, u8 dtype tag 0 = f32,
raw little-endian payload), and a trailing u32 CRC-32 of everything before
it. All multi-byte integers are little-endian. Saving the same parameter
table twice produces identical bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"MCAW"
FORMAT_VERSION = 1
DTYPE_F32 = 0


def save_checkpoint(table: dict[str, np.ndarray], path: str | Path) -> None:
    """Write named f32 tensors; insertion order of the dict is preserved."""
    names = list(table)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    for name in names:
        arr = np.ascontiguousarray(np.asarray(table[name], dtype="<f4"))
        encoded = name.encode("utf-8")
        body += struct.pack("<I", len(encoded))
        body += encoded
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += struct.pack("<B", DTYPE_F32)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint, verifying the checksum and format version."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    stored = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    actual = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"{path}: checksum mismatch "
                              f"(stored {stored:#010x}, computed {actual:#010x})")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    table: dict[str, np.ndarray] = {}
    pos = 8
    end = len(raw) - 4
    while pos < end:
        if pos + 4 > end:
            raise CheckpointError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        (tag,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        if tag != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
        count = int(np.prod(dims)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > end:
            raise CheckpointError(f"{path}: payload for {name!r} runs past the end")
        if name in table:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        table[name] = np.frombuffer(raw, dtype="<f4", offset=pos,
                                    count=count).reshape(dims).copy()
        pos += nbytes
    return table
