"""Binary checkpoint format.

Layout (little-endian)::

    b"TAUG" | version u32 | entry count u32
    entries: name-len u32 | name utf-8 | rank u32 | dims u32 x rank | dtype flag u32 | data
    blob-len u32 | blob (utf-8 JSON: RNG states and run metadata)
    counter count u32 | counters: name-len u32 | name | value i64

The dtype flag is 0 for float32 and 1 for float64. Encoding is canonical, so
save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"TAUG"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_FLAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    blob: dict = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix`` with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _name(buf: list, s: str) -> None:
    raw = s.encode("utf-8")
    buf.append(struct.pack("<I", len(raw)))
    buf.append(raw)


def encode(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _FLAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        _name(out, name)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(struct.pack("<I", _FLAGS[arr.dtype]))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_FLAGS[arr.dtype]]).tobytes())
    blob = json.dumps(ckpt.blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<I", len(ckpt.counters)))
    for name, val in ckpt.counters.items():
        _name(out, name)
        out.append(struct.pack("<q", int(val)))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"unexpected end of checkpoint at byte offset {self.pos} "
                              f"(wanted {n} bytes, {len(self.data) - self.pos} left)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.name()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        flag = r.u32()
        if flag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype flag {flag} at byte offset {r.pos - 4}")
        dt = _DTYPES[flag]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    blob = json.loads(r.take(r.u32()).decode("utf-8"))
    counters = {}
    for _ in range(r.u32()):
        name = r.name()
        counters[name] = struct.unpack("<q", r.take(8))[0]
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after byte offset {r.pos}")
    return Checkpoint(tensors, blob, counters)


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
