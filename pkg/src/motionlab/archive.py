"""Binary tensor archive.

Layout (all integers little-endian, no padding)::

    b"TARC" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | dims u32[rank] | dtype u8 | payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8. Payload is row-major.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import Tensor

MAGIC = b"TARC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {torch.float32: 0, torch.float64: 1, torch.uint8: 2}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_archive(tensors: Mapping[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if t.dim() > 255:
            raise ValueError(f"{name}: rank {t.dim()} too large")
        code = _CODES[t.dtype]
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(struct.pack("<B", code))
        buf.write(t.numpy().astype(_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


def decode_archive(data: bytes) -> dict[str, Tensor]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out: dict[str, Tensor] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not utf-8", start + 2) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        code_at = pos
        (code,) = struct.unpack("<B", take(1, "dtype"))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", code_at)
        dt = _DTYPES[code]
        count_el = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(count_el * dt.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        out[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise FormatError("trailing bytes after last tensor", pos)
    return out


def write_archive(path: str | Path, tensors: Mapping[str, Tensor]) -> None:
    Path(path).write_bytes(encode_archive(tensors))


def read_archive(path: str | Path) -> dict[str, Tensor]:
    return decode_archive(Path(path).read_bytes())


META_KEY = "meta/json"


@dataclass
class Checkpoint:
    """Named tensors plus a JSON metadata blob stored as a uint8 tensor."""

    tensors: dict[str, Tensor]
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "")

    def to_archive(self) -> dict[str, Tensor]:
        blob = json.dumps(self.meta, sort_keys=True).encode("utf-8")
        out = {META_KEY: torch.frombuffer(bytearray(blob), dtype=torch.uint8)}
        out.update(self.tensors)
        return out

    def save(self, path: str | Path) -> None:
        write_archive(path, self.to_archive())

    @classmethod
    def from_archive(cls, tensors: Mapping[str, Tensor]) -> "Checkpoint":
        tensors = dict(tensors)
        blob = tensors.pop(META_KEY, None)
        meta = json.loads(bytes(blob.tolist()).decode("utf-8")) if blob is not None else {}
        return cls(tensors, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_archive(read_archive(path))

    def equal(self, other: "Checkpoint") -> bool:
        if self.meta != other.meta or self.tensors.keys() != other.tensors.keys():
            return False
        return all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
