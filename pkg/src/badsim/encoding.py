"""Canonical little-endian binary encoding helpers.

Variable-length integers use the Bitcoin CompactSize layout. Decoding is
strict: non-minimal varints and short reads raise :class:`MalformedInput`
carrying the byte offset of the problem.
"""

from __future__ import annotations

import hashlib
import struct

U64_MAX = (1 << 64) - 1


class MalformedInput(ValueError):
    """Raised when a byte payload cannot be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


def sha256d(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def varint(n: int) -> bytes:
    if n < 0 or n > U64_MAX:
        raise ValueError(f"varint out of range: {n}")
    if n < 0xFD:
        return bytes([n])
    if n <= 0xFFFF:
        return b"\xfd" + struct.pack("<H", n)
    if n <= 0xFFFFFFFF:
        return b"\xfe" + struct.pack("<I", n)
    return b"\xff" + struct.pack("<Q", n)


def u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def var_bytes(data: bytes) -> bytes:
    return varint(len(data)) + data


class Reader:
    """Cursor over a byte string with strict decoding."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedInput(f"truncated input (wanted {n} bytes)", self.pos)
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def varint(self) -> int:
        start = self.pos
        tag = self.take(1)[0]
        if tag < 0xFD:
            return tag
        if tag == 0xFD:
            n, floor = struct.unpack("<H", self.take(2))[0], 0xFD
        elif tag == 0xFE:
            n, floor = struct.unpack("<I", self.take(4))[0], 0x10000
        else:
            n, floor = struct.unpack("<Q", self.take(8))[0], 0x100000000
        if n < floor:
            raise MalformedInput("non-canonical varint", start)
        return n

    def var_bytes(self) -> bytes:
        return self.take(self.varint())

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise MalformedInput("trailing bytes", self.pos)
