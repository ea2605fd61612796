"""Canonical byte encoding used everywhere a structure is hashed or signed.

Fields are concatenated in declared order, each prefixed with a 4-byte
big-endian length. The encoding is injective for a fixed field count, so two
distinct field tuples never serialize identically; that property is what makes
digests over encoded structures meaningful.
"""

from __future__ import annotations

import struct

from .errors import FormatError

_LEN = struct.Struct(">I")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def encode_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        if not isinstance(f, (bytes, bytearray, memoryview)):
            raise FormatError(f"field must be bytes, got {type(f).__name__}")
        out += _LEN.pack(len(f))
        out += f
    return bytes(out)


def decode_fields(data: bytes, count: int) -> list[bytes]:
    """Parse exactly `count` length-prefixed fields; trailing bytes are an error."""
    fields, offset = decode_fields_prefix(data, count)
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after {count} fields")
    return fields


def decode_fields_prefix(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Parse `count` fields from the front of `data`, returning them and the offset reached."""
    fields: list[bytes] = []
    offset = 0
    for i in range(count):
        if offset + 4 > len(data):
            raise FormatError(f"truncated length prefix for field {i}")
        (n,) = _LEN.unpack_from(data, offset)
        offset += 4
        if offset + n > len(data):
            raise FormatError(f"field {i} declares {n} bytes, {len(data) - offset} available")
        fields.append(bytes(data[offset : offset + n]))
        offset += n
    return fields, offset


def encode_u16(value: int) -> bytes:
    return _U16.pack(value)


def decode_u16(data: bytes) -> int:
    if len(data) != 2:
        raise FormatError("u16 must be 2 bytes")
    return _U16.unpack(data)[0]


def encode_u32(value: int) -> bytes:
    return _U32.pack(value)


def decode_u32(data: bytes) -> int:
    if len(data) != 4:
        raise FormatError("u32 must be 4 bytes")
    return _U32.unpack(data)[0]


def encode_u64(value: int) -> bytes:
    return _U64.pack(value)


def decode_u64(data: bytes) -> int:
    if len(data) != 8:
        raise FormatError("u64 must be 8 bytes")
    return _U64.unpack(data)[0]


def encode_int(value: int) -> bytes:
    """Sign-free big-endian encoding of a non-negative big integer (empty for 0)."""
    if value < 0:
        raise FormatError("negative integers have no canonical encoding here")
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


def decode_int(data: bytes) -> int:
    return int.from_bytes(data, "big")
