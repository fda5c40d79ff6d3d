"""Container for the on-disk formats: a JSON header followed by a binary payload.

Layout: 4-byte magic ``HMFG``, little-endian u32 header length, UTF-8 JSON
header (sorted keys), then the raw little-endian payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

MAGIC = b"HMFG"


def dumps(header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def loads(buf: bytes) -> tuple[dict, bytes]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ValueError("not an HMFG container (bad magic)")
    (n,) = struct.unpack("<I", buf[4:8])
    if 8 + n > len(buf):
        raise ValueError("truncated header")
    header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    return header, buf[8 + n :]


def write(path, header: dict, payload: bytes) -> None:
    Path(path).write_bytes(dumps(header, payload))


def read(path) -> tuple[dict, bytes]:
    return loads(Path(path).read_bytes())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
