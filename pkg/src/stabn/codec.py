"""Little-endian binary helpers shared by the checkpoint and dataset formats."""

from __future__ import annotations

import struct
from typing import Dict, Tuple

import numpy as np

from .errors import FormatError


def encode_kv(pairs: Dict[str, str]) -> bytes:
    """Length-prefixed UTF-8 block of ``key=value`` lines, keys in given order."""
    for k, v in pairs.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"cannot encode key/value pair {k!r}={v!r}")
    body = "".join(f"{k}={v}\n" for k, v in pairs.items()).encode("utf-8")
    return struct.pack("<I", len(body)) + body


def encode_tensor(name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    array = np.asarray(array, dtype=np.float64)
    header = struct.pack("<H", len(raw)) + raw + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype("<f8").tobytes()


class Reader:
    """Sequential reader that turns short reads into :class:`FormatError`."""

    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what} is truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u16(self) -> int:
        return self.unpack("<H")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def expect_magic(self, magic: bytes, version: int) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        v = self.u8()
        if v != version:
            raise FormatError(f"{self.what}: unsupported version {v}, expected {version}")

    def kv(self) -> Dict[str, str]:
        n = self.u32()
        try:
            text = self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: config block is not UTF-8") from exc
        out = {}
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{self.what}: malformed config line {line!r}")
            out[key] = value
        return out

    def tensor(self) -> Tuple[str, np.ndarray]:
        name = self.take(self.u16()).decode("utf-8")
        ndim = self.u8()
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return name, data.reshape(shape)

    def at_end(self) -> bool:
        return self.pos == len(self.data)
