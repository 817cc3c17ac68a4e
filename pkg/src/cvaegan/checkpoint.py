"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CKPT" | u32 version | u32 entry count
    entries: u16 name length | UTF-8 name | u8 rank | u32 dim * rank | f32 payload
    u32 metadata length | UTF-8 JSON metadata

Tensor payloads are float32, so a float32 model round-trips bit-exactly.
The metadata trailer carries the training config, epoch counter, RNG state
and optimizer step counts.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CKPT"
VERSION = 1


def encode(tensors: dict, meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, source):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw: bytes, source="<bytes>"):
    """Parse checkpoint bytes into ``(tensors, meta)``."""
    r = _Reader(raw, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}", offset=0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}", offset=4)
    tensors = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "entry name length")
        try:
            name = r.take(name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: entry name is not UTF-8", offset=start + 2) from exc
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        shape = r.unpack(f"<{rank}I", f"shape of {name!r}")
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    (meta_len,) = r.unpack("<I", "metadata length")
    blob = r.take(meta_len, "metadata")
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt metadata", offset=r.pos - meta_len) from exc
    if r.pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - r.pos} trailing bytes", offset=r.pos)
    return tensors, meta


def write_checkpoint(path, tensors: dict, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    path = Path(path)
    return decode(path.read_bytes(), source=str(path))
