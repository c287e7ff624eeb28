"""Checksummed binary snapshot files.

Layout (little endian)::

    magic[8] | u32 section_count | (u32 tag, u64 length, body[length])* | u64 checksum

The checksum is an 8-byte BLAKE2b digest of every byte before it. Files
are written to a temporary sibling and renamed into place so a crash never
leaves a half-written snapshot under the final name.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

from .errors import SnapshotIntegrityError

MAGIC_LEN = 8
_SECTION_HEAD = struct.Struct("<IQ")
_COUNT = struct.Struct("<I")
_CHECKSUM = struct.Struct("<Q")


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class Packer:
    """Append-only little-endian encoder for one section body."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Packer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> "Packer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Packer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def i64(self, v: int) -> "Packer":
        self._parts.append(struct.pack("<q", v))
        return self

    def f64(self, v: float) -> "Packer":
        self._parts.append(struct.pack("<d", v))
        return self

    def text(self, v: str) -> "Packer":
        raw = v.encode("utf-8")
        self.u32(len(raw))
        self._parts.append(raw)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Unpacker:
    def __init__(self, data: bytes, section: str = "?"):
        self._data = data
        self._pos = 0
        self._section = section

    def _take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self._pos + size > len(self._data):
            raise SnapshotIntegrityError(f"section_truncated: {self._section}")
        out = struct.unpack_from(fmt, self._data, self._pos)
        self._pos += size
        return out

    def u8(self) -> int:
        return self._take("<B")[0]

    def u32(self) -> int:
        return self._take("<I")[0]

    def u64(self) -> int:
        return self._take("<Q")[0]

    def i64(self) -> int:
        return self._take("<q")[0]

    def f64(self) -> float:
        return self._take("<d")[0]

    def text(self) -> str:
        n = self.u32()
        if self._pos + n > len(self._data):
            raise SnapshotIntegrityError(f"section_truncated: {self._section}")
        raw = self._data[self._pos : self._pos + n]
        self._pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise SnapshotIntegrityError(f"bad_text: {self._section}") from e

    def done(self) -> None:
        if self._pos != len(self._data):
            raise SnapshotIntegrityError(f"trailing_bytes: {self._section}")


def encode_snapshot(magic: bytes, sections: Iterable[tuple[int, bytes]]) -> bytes:
    if len(magic) != MAGIC_LEN:
        raise ValueError("magic must be 8 bytes")
    sections = list(sections)
    parts = [magic, _COUNT.pack(len(sections))]
    for tag, body in sections:
        parts.append(_SECTION_HEAD.pack(tag, len(body)))
        parts.append(body)
    payload = b"".join(parts)
    return payload + _CHECKSUM.pack(checksum64(payload))


def decode_snapshot(magic: bytes, data: bytes) -> dict[int, bytes]:
    if len(data) < MAGIC_LEN + _COUNT.size + _CHECKSUM.size:
        raise SnapshotIntegrityError("file_truncated")
    payload, tail = data[: -_CHECKSUM.size], data[-_CHECKSUM.size :]
    (stored,) = _CHECKSUM.unpack(tail)
    if stored != checksum64(payload):
        raise SnapshotIntegrityError("checksum_mismatch")
    if payload[:MAGIC_LEN] != magic:
        raise SnapshotIntegrityError(f"bad_magic: {payload[:MAGIC_LEN]!r}")
    pos = MAGIC_LEN
    (count,) = _COUNT.unpack_from(payload, pos)
    pos += _COUNT.size
    sections: dict[int, bytes] = {}
    for _ in range(count):
        if pos + _SECTION_HEAD.size > len(payload):
            raise SnapshotIntegrityError("file_truncated")
        tag, length = _SECTION_HEAD.unpack_from(payload, pos)
        pos += _SECTION_HEAD.size
        if pos + length > len(payload):
            raise SnapshotIntegrityError("file_truncated")
        sections[tag] = payload[pos : pos + length]
        pos += length
    if pos != len(payload):
        raise SnapshotIntegrityError("trailing_bytes")
    return sections


def write_file_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def require(sections: dict[int, bytes], tag: int, name: str) -> bytes:
    try:
        return sections[tag]
    except KeyError:
        raise SnapshotIntegrityError(f"missing_section: {name}") from None
