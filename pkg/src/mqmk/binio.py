"""Little-endian binary containers shared by the checkpoint and pool files.

Layout of a named blob: u16 name length, utf-8 name, u32 ndim, u32 dims,
then float64 values row-major. Containers end with a u32 CRC32 of every
preceding byte.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


class FormatError(ValueError):
    """Malformed or corrupted binary file; ``offset`` locates the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u8(self, v: int):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v: int):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v: float):
        self.parts.append(struct.pack("<d", v))

    def u32_array(self, values):
        self.parts.append(np.asarray(values, dtype="<u4").tobytes())

    def blob(self, name: str, values: np.ndarray):
        encoded = name.encode("utf-8")
        self.u16(len(encoded))
        self.raw(encoded)
        self.u32(values.ndim)
        self.u32_array(values.shape)
        self.raw(np.ascontiguousarray(values, dtype="<f8").tobytes())

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int, checksum: bool = True):
        self.data = data
        self.pos = 0
        if checksum:
            if len(data) < len(magic) + 8:
                raise FormatError(f"file too short ({len(data)} bytes)", len(data))
            stored = struct.unpack_from("<I", data, len(data) - 4)[0]
            if zlib.crc32(data[:-4]) != stored:
                raise FormatError("checksum mismatch (truncated or corrupted file)", len(data) - 4)
            self.end = len(data) - 4
        else:
            self.end = len(data)
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        v = self.u32()
        if v != version:
            raise FormatError(f"unsupported version {v}, expected {version}", len(magic))

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"unexpected end of data reading {n} bytes", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def u32_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)

    def blob(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u16()).decode("utf-8")
        shape = tuple(int(s) for s in self.u32_array(self.u32()))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return name, values

    def expect_end(self):
        if self.pos != self.end:
            raise FormatError(f"{self.end - self.pos} trailing bytes", self.pos)
