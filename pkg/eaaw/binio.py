"""
Little-endian binary helpers shared by the model and trigger file formats.

The reader tracks its byte offset so every FormatError can say where a file
went wrong.
"""

from __future__ import annotations

import struct

import numpy as np

from eaaw.errors import FormatError

U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")


def checksum(payload: bytes) -> int:
    """Sum of all bytes modulo 2**64."""
    return int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))


class ByteReader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise FormatError(
                f"truncated file: expected {n} bytes for {what}, "
                f"{len(self.data) - self.offset} left",
                offset=self.offset,
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def expect(self, literal: bytes, what: str) -> None:
        start = self.offset
        if self.take(len(literal), what) != literal:
            raise FormatError(f"bad {what}", offset=start)

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return U64.unpack(self.take(8, what))[0]

    def f64_array(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)

    def u32_array(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<u4").astype(np.int64)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes after payload", offset=self.offset
            )


def pack_u32s(values) -> bytes:
    return b"".join(U32.pack(int(v)) for v in values)
