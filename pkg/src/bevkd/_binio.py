"""Little-endian binary readers/writers shared by checkpoint and cache files."""

from __future__ import annotations

import struct

import numpy as np


class FormatError(Exception):
    """Malformed binary file; carries the byte offset where parsing failed."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class ByteReader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, n: int, field: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(self.offset, f"truncated while reading {field}")
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.read(4, field))[0]

    def f32_array(self, count: int, field: str) -> np.ndarray:
        raw = self.read(4 * count, field)
        return np.frombuffer(raw, dtype="<f4").copy()

    def expect_magic(self, magic: bytes, field: str = "magic") -> None:
        at = self.offset
        got = self.read(len(magic), field)
        if got != magic:
            raise FormatError(at, f"bad {field}: expected {magic!r}, got {got!r}")

    def expect_eof(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(self.offset, f"{len(self.data) - self.offset} trailing bytes")


class ByteWriter:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, data: bytes) -> None:
        self.buf += data

    def u32(self, value: int) -> None:
        self.buf += struct.pack("<I", value)

    def f32_array(self, arr: np.ndarray) -> None:
        self.buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()

    def getvalue(self) -> bytes:
        return bytes(self.buf)
