"""SKV1 binary checkpoints and line-oriented ``key=value`` config text.

Layout (all integers u32 little-endian)::

    b"SKV1" | version | config byte length | config UTF-8 text
    | tensor count | per tensor: name length, name, rank, extents..., float32 LE data
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from .config import ModelConfig
from .errors import FormatError
from .model import Checkpoint

MAGIC = b"SKV1"
VERSION = 1
_U32 = struct.Struct("<I")
# keys in the config block that are not ModelConfig fields
_META_PREFIX = "meta."


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv_file(path: str | os.PathLike) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


def _config_block(ck: Checkpoint) -> bytes:
    lines = ck.config.to_lines() + [f"{_META_PREFIX}{k}={v}" for k, v in sorted(ck.meta.items())]
    return ("\n".join(lines) + "\n").encode("utf-8")


def dumps(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    block = _config_block(ck)
    buf.write(_U32.pack(len(block)))
    buf.write(block)
    buf.write(_U32.pack(len(ck.tensors)))
    for name, arr in ck.tensors.items():
        encoded = name.encode("utf-8")
        buf.write(_U32.pack(len(encoded)))
        buf.write(encoded)
        buf.write(_U32.pack(arr.ndim))
        for extent in arr.shape:
            buf.write(_U32.pack(extent))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not an SKV1 checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"config block is not UTF-8: {exc}") from None
    entries = parse_kv_text(text)
    meta = {k[len(_META_PREFIX):]: v for k, v in entries.items() if k.startswith(_META_PREFIX)}
    config = ModelConfig.from_mapping({k: v for k, v in entries.items() if not k.startswith(_META_PREFIX)})
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after tensor table")
    ck = Checkpoint(config, tensors, meta)
    ck.validate()
    return ck


def save(ck: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ck))


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
