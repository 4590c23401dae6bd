"""Block mask serialization: packed binary, sparse CSV and PGM images."""

from __future__ import annotations

import io
import struct
from enum import Enum
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .mask import BlockMask

MAGIC = b"DRBM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
# Any mask larger than this would need more than 2 GiB of packed rows.
MAX_BLOCKS_PER_DIM = 1 << 17


class MaskFormat(str, Enum):
    BINARY = "binary"
    CSV = "csv"
    PGM = "pgm"

    @classmethod
    def parse(cls, value: "MaskFormat | str") -> "MaskFormat":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown mask format {value!r}") from None

    @classmethod
    def from_suffix(cls, path: str | Path) -> "MaskFormat":
        suffix = Path(path).suffix.lower()
        return {".csv": cls.CSV, ".pgm": cls.PGM}.get(suffix, cls.BINARY)


class MaskFormatError(ValueError):
    """Raised when a mask file is malformed."""


def encode_binary(mask: BlockMask) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION, mask.blocks_per_dim) + mask.packed.tobytes()


def decode_binary(data: bytes) -> BlockMask:
    if len(data) < _HEADER.size:
        raise MaskFormatError("truncated header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MaskFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MaskFormatError(f"unsupported version {version}")
    if n < 1 or n > MAX_BLOCKS_PER_DIM:
        raise MaskFormatError(f"blocks_per_dim {n} out of range")
    row_bytes = (n + 7) // 8
    payload = memoryview(data)[_HEADER.size:]
    if len(payload) < n * row_bytes:
        raise MaskFormatError(f"truncated payload: {len(payload)} of {n * row_bytes} bytes")
    if len(payload) > n * row_bytes:
        raise MaskFormatError("trailing bytes after payload")
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(n, row_bytes)
    return BlockMask(n, packed.copy())


def encode_csv(mask: BlockMask) -> str:
    rows, cols = np.nonzero(mask.to_array())
    out = io.StringIO()
    out.write(f"# blocks_per_dim={mask.blocks_per_dim}\n")
    out.write("row,col\n")
    for r, c in zip(rows.tolist(), cols.tolist()):
        out.write(f"{r},{c}\n")
    return out.getvalue()


def decode_csv(text: str) -> BlockMask:
    n = None
    entries: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "blocks_per_dim":
                try:
                    n = int(value)
                except ValueError:
                    raise MaskFormatError(f"line {lineno}: bad blocks_per_dim") from None
            continue
        if line == "row,col":
            continue
        try:
            r, c = (int(v) for v in line.split(","))
        except ValueError:
            raise MaskFormatError(f"line {lineno}: expected 'row,col', got {line!r}") from None
        entries.append((r, c))
    if n is None:
        raise MaskFormatError("missing '# blocks_per_dim=' header")
    if n < 1 or n > MAX_BLOCKS_PER_DIM:
        raise MaskFormatError(f"blocks_per_dim {n} out of range")
    bits = np.zeros((n, n), dtype=bool)
    for r, c in entries:
        if not (0 <= r < n and 0 <= c < n):
            raise MaskFormatError(f"entry ({r}, {c}) outside a {n}x{n} mask")
        bits[r, c] = True
    return BlockMask.from_array(bits)


def encode_pgm(mask: BlockMask) -> bytes:
    n = mask.blocks_per_dim
    pixels = np.where(mask.to_array(), 0, 255).astype(np.uint8)
    return f"P5\n{n} {n}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(data: bytes) -> BlockMask:
    # header: magic, width, height, maxval separated by whitespace; comments start with '#'
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise MaskFormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != b"P5":
        raise MaskFormatError(f"bad PGM magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MaskFormatError("non-integer PGM header field") from None
    if width != height or width < 1 or width > MAX_BLOCKS_PER_DIM:
        raise MaskFormatError(f"bad PGM dimensions {width}x{height}")
    if maxval != 255:
        raise MaskFormatError(f"unsupported PGM maxval {maxval}")
    raster = data[pos:]
    if len(raster) < width * height:
        raise MaskFormatError("truncated PGM raster")
    pixels = np.frombuffer(raster, dtype=np.uint8, count=width * height).reshape(height, width)
    return BlockMask.from_array(pixels < 128)


def encode_mask(mask: BlockMask, fmt: MaskFormat | str) -> bytes:
    fmt = MaskFormat.parse(fmt)
    if fmt is MaskFormat.BINARY:
        return encode_binary(mask)
    if fmt is MaskFormat.CSV:
        return encode_csv(mask).encode("ascii")
    return encode_pgm(mask)


def decode_mask(data: bytes) -> BlockMask:
    """Decode any supported format, detected from the leading bytes."""
    if data[:4] == MAGIC:
        return decode_binary(data)
    if data[:2] == b"P5":
        return decode_pgm(data)
    if data[:1] in (b"#", b"r"):
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError:
            raise MaskFormatError("CSV mask is not ASCII") from None
        return decode_csv(text)
    if len(data) < 4:
        raise MaskFormatError("truncated header")
    raise MaskFormatError(f"unrecognized mask header {data[:4]!r}")


def write_mask(mask: BlockMask, fmt: MaskFormat | str, destination: str | Path | BinaryIO) -> None:
    payload = encode_mask(mask, fmt)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        Path(destination).write_bytes(payload)


def read_mask(source: str | Path | BinaryIO) -> BlockMask:
    data = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    return decode_mask(bytes(data))
