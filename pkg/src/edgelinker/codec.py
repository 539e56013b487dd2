"""Canonical wire encoding shared by every record in the system.

One deterministic, injective byte layout: fields in declaration order,
unsigned integers as 8-byte big-endian, byte strings length-prefixed with a
4-byte big-endian length, lists count-prefixed the same way, and variant
tags as a single byte. Hashing, signing and encryption all run over these
bytes, so independent nodes agree bit-for-bit.
"""

from __future__ import annotations

import struct

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")

U64_MAX = 2**64 - 1


class DecodeError(ValueError):
    """Raised when bytes do not parse as the expected record."""


def enc_u64(value: int) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"value out of u64 range: {value}")
    return _U64.pack(value)


def enc_u8(value: int) -> bytes:
    if not 0 <= value <= 0xFF:
        raise ValueError(f"value out of u8 range: {value}")
    return bytes([value])


def enc_bytes(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


def enc_str(text: str) -> bytes:
    return enc_bytes(text.encode("utf-8"))


def enc_list(items, enc_item) -> bytes:
    parts = [_U32.pack(len(items))]
    parts.extend(enc_item(item) for item in items)
    return b"".join(parts)


def canonical_encode(value) -> bytes:
    """Encode a bare int, byte string, list, or any record exposing encode()."""
    if isinstance(value, bool):
        raise TypeError("booleans have no canonical encoding")
    if isinstance(value, int):
        return enc_u64(value)
    if isinstance(value, (bytes, bytearray)):
        return enc_bytes(bytes(value))
    if isinstance(value, str):
        return enc_str(value)
    if isinstance(value, (list, tuple)):
        return enc_list(list(value), canonical_encode)
    enc = getattr(value, "encode", None)
    if callable(enc):
        return enc()
    raise TypeError(f"no canonical encoding for {type(value).__name__}")


class Reader:
    """Sequential decoder over one canonical byte string."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise DecodeError(f"short read: need {n} bytes at offset {self._pos}")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def bytes_(self) -> bytes:
        return self.take(self.u32())

    def str_(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8 in string field") from exc

    def list_(self, decode_item) -> list:
        count = self.u32()
        return [decode_item(self) for _ in range(count)]

    def expect_tag(self, tag: int) -> None:
        got = self.u8()
        if got != tag:
            raise DecodeError(f"expected record tag {tag}, got {got}")

    def expect_eof(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos
