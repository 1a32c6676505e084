"""Binary tensor container used for checkpoints and score/mask artifacts.

Layout (all integers little-endian):

    magic  b"LEML"
    u32    format version (currently 1)
    u32    metadata length, then that many bytes of UTF-8 JSON
    u32    tensor count
    per tensor:
        u16    name length, then name bytes (UTF-8)
        u8     rank
        u32*r  extents
        f32*n  raw data, C order
    u64-sized trailing checksum (blake2b-8) over all preceding bytes

Round trips are bit-exact for float32 payloads; any other dtype is refused at
write time rather than silently converted.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"LEML"
FORMAT_VERSION = 1
_CHECKSUM_BYTES = 8


class ContainerError(Exception):
    """Base class for container read failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_BYTES).digest()


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise TypeError(f"container stores float32 tensors only; {name!r} is {arr.dtype}")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"container truncated: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + _CHECKSUM_BYTES:
        raise TruncatedError(f"container file too short ({len(raw)} bytes)")
    payload, stored = raw[:-_CHECKSUM_BYTES], raw[-_CHECKSUM_BYTES:]
    if payload[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {payload[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if _checksum(payload) != stored:
        raise ChecksumError("container checksum mismatch")
    r = _Reader(payload)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32, copy=True)
    if r.pos != len(payload):
        raise TruncatedError(f"{len(payload) - r.pos} unexpected trailing bytes before checksum")
    return meta, tensors
