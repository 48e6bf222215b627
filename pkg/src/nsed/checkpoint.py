"""Binary model archive.

Layout: ``b"NSED1"``, a uint32 byte length and that many bytes of UTF-8
``key=value`` manifest lines, a uint32 parameter count, then per parameter a
uint32 name length, the UTF-8 name, a uint32 rank, rank uint32 dimensions and
the little-endian float32 values. All integers are little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"NSED1"


def save(path, params: dict, manifest: dict):
    lines = []
    for key, value in manifest.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"manifest entry {key!r} cannot be stored on one line")
        lines.append(f"{key}={text}")
    blob = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        handle.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            value = np.asarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", value.ndim))
            handle.write(struct.pack(f"<{value.ndim}I", *value.shape))
            handle.write(value.tobytes())


def load(path) -> tuple[dict, dict]:
    """Returns ``(params, manifest)``; parameters come back as float32."""
    with open(path, "rb") as handle:
        data = handle.read()
    if not data.startswith(MAGIC):
        raise DataError(f"{path} is not a model checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (length,) = take("<I")
    manifest = {}
    text = data[pos:pos + length].decode("utf-8")
    pos += length
    for line in text.split("\n") if text else []:
        key, _, value = line.partition("=")
        manifest[key] = value
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    return params, manifest
