"""Versioned binary checkpoint container.

Layout (little endian)::

    b"ALDRCKPT" | u32 version | u32 n | n bytes of "key=value" lines (utf-8)
    u32 n_records | records...
    record: u16 name_len | name | u8 dtype tag | u8 ndim | ndim * u32 | raw values

Config values are JSON encoded so nested state (rng state, tuples) survives.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"ALDRCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]


def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    text = "".join(f"{k}={json.dumps(v, sort_keys=True)}\n" for k, v in sorted(config.items())).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = np.dtype("<i8") if arr.dtype.kind in "iu" else np.dtype("<f8")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", _TAGS[dtype], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"incompatible checkpoint version {version}; this build reads version {VERSION}")
    config = {}
    try:
        for line in r.take(n).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            config[key] = json.loads(value)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")
    return Checkpoint(config, tensors)
