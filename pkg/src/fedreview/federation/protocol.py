"""Binary encoding of adapter messages and ``.fedlora`` checkpoints.

Layout (little-endian)::

    b"FDLR" | version u16 | msg_type u8 | round u32 | client_id u32
    | sample_count u64 | entry_count u32
    | entry_count x { name_len u16 | name utf-8 | rows u32 | cols u32 | rows*cols f64 }
    | crc32 u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ProtocolError
from ..lora import Entry

MAGIC = b"FDLR"
VERSION = 1
_HEADER = struct.Struct("<4sHBIIQI")
_ENTRY_HEAD = struct.Struct("<H")
_DIMS = struct.Struct("<II")
_CRC = struct.Struct("<I")


class MsgType(IntEnum):
    UPDATE = 1
    AGGREGATE = 2
    DONE = 3


@dataclass(frozen=True)
class AdapterUpdate:
    """One client's (or the server's) adapter state for a round."""

    client_id: int
    round: int
    sample_count: int
    entries: tuple[Entry, ...] = ()
    msg_type: MsgType = MsgType.UPDATE

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def equals(self, other: AdapterUpdate) -> bool:
        return (
            (self.client_id, self.round, self.sample_count, self.msg_type)
            == (other.client_id, other.round, other.sample_count, other.msg_type)
            and self.names() == other.names()
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for (_, a), (_, b) in zip(self.entries, other.entries)
            )
        )


def encode_update(update: AdapterUpdate) -> bytes:
    parts = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            int(update.msg_type),
            update.round,
            update.client_id,
            update.sample_count,
            len(update.entries),
        )
    ]
    for name, matrix in update.entries:
        raw = name.encode("utf-8")
        m = np.asarray(matrix, dtype="<f8")
        if m.ndim != 2:
            raise ProtocolError(f"entry {name!r} is not a matrix (shape {m.shape})")
        parts += [_ENTRY_HEAD.pack(len(raw)), raw, _DIMS.pack(*m.shape), np.ascontiguousarray(m).tobytes()]
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise ProtocolError(f"message truncated while reading {what}")
    return buf[offset : offset + size]


def decode_update(buf: bytes) -> AdapterUpdate:
    if len(buf) < _HEADER.size + _CRC.size:
        raise ProtocolError(f"message too short ({len(buf)} bytes)")
    magic, version, msg_type, rnd, client_id, samples, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version} (expected {VERSION})")
    (crc,) = _CRC.unpack_from(buf, len(buf) - _CRC.size)
    if zlib.crc32(buf[: -_CRC.size]) != crc:
        raise ProtocolError("CRC mismatch")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type}") from None
    body = buf[: -_CRC.size]
    offset = _HEADER.size
    entries = []
    for _ in range(count):
        (name_len,) = _ENTRY_HEAD.unpack(_take(body, offset, _ENTRY_HEAD.size, "name length"))
        offset += _ENTRY_HEAD.size
        try:
            name = _take(body, offset, name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("entry name is not valid UTF-8") from None
        offset += name_len
        rows, cols = _DIMS.unpack(_take(body, offset, _DIMS.size, f"{name} dims"))
        offset += _DIMS.size
        nbytes = 8 * rows * cols
        values = np.frombuffer(_take(body, offset, nbytes, f"{name} values"), dtype="<f8")
        offset += nbytes
        entries.append((name, values.astype(np.float64).reshape(rows, cols)))
    if offset != len(body):
        raise ProtocolError(f"{len(body) - offset} trailing bytes after entries")
    return AdapterUpdate(client_id, rnd, samples, tuple(entries), kind)


def write_checkpoint(path: str | Path, update: AdapterUpdate) -> Path:
    path = Path(path)
    path.write_bytes(encode_update(update))
    return path


def read_checkpoint(path: str | Path) -> AdapterUpdate:
    return decode_update(Path(path).read_bytes())


def same_layout(a: Sequence[Entry], b: Sequence[Entry]) -> bool:
    return len(a) == len(b) and all(na == nb and ma.shape == mb.shape for (na, ma), (nb, mb) in zip(a, b))
