"""File helpers shared by every artifact writer: atomic writes, hashing,
and the common magic+version+JSON-header binary container."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile


def atomic_write_bytes(path: str, data: bytes):
    """Write via a sibling temp file and rename, so readers never observe
    a partial file."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    """Stable serialization (sorted keys, fixed separators) so equal configs
    hash equally."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def pack_container(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    """magic(4) + version u32 LE + header-length u32 LE + UTF-8 JSON header
    + raw payload."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    hdr = canonical_json(header).encode("utf-8")
    return magic + struct.pack("<I", version) + struct.pack("<I", len(hdr)) + hdr + payload


def unpack_container(data: bytes, magic: bytes, version: int) -> tuple[dict, bytes]:
    if data[:4] != magic:
        raise ValueError(
            f"bad magic: expected {magic!r}, found {data[:4]!r} at offset 0"
        )
    (ver,) = struct.unpack_from("<I", data, 4)
    if ver != version:
        raise ValueError(f"unsupported format version {ver}, expected {version}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    if 12 + hlen > len(data):
        raise ValueError(
            f"truncated header: need {12 + hlen} bytes, file has {len(data)}"
        )
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    return header, data[12 + hlen :]
