"""Binary array container shared by model checkpoints and latent stores.

Layout (little-endian)::

    magic      4 bytes
    version    u16
    header     u32 length + UTF-8 JSON
    count      u32
    arrays     count x (u16 name length, name, u8 ndim, ndim x u32 dims, f32 data)
    crc32      u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    """Malformed, truncated or corrupted container file."""


class VersionError(ContainerError):
    pass


def encode(magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    hdr = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<H", version), struct.pack("<I", len(hdr)), hdr,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 18:
        raise ContainerError("file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if body[:4] != magic:
        raise ContainerError(f"bad magic {body[:4]!r}, expected {magic!r}")
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum mismatch (file corrupted or truncated)")
    (ver,) = struct.unpack_from("<H", body, 4)
    if ver != version:
        raise VersionError(f"format version {ver}, this build reads {version}")
    try:
        pos = 6
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        header = json.loads(body[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(body):
                raise ContainerError("array data truncated")
            arrays[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed container: {exc}") from exc
    if pos != len(body):
        raise ContainerError("trailing bytes after arrays")
    return header, arrays


def write(path, magic, version, header, arrays) -> None:
    Path(path).write_bytes(encode(magic, version, header, arrays))


def read(path, magic, version):
    return decode(Path(path).read_bytes(), magic, version)
