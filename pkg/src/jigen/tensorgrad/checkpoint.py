"""Flat binary parameter checkpoints.

Layout (little-endian)::

    b"JGCK" | u32 version | u32 count
    count x ( u32 name_len | name bytes | u32 rank | rank x u32 dim | float32 values )
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, Union

import numpy as np

from .tensor import Parameter

MAGIC = b"JGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Iterable[Parameter], path: Union[str, Path]) -> None:
    params = list(params)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a checkpoint into an ordered ``{name: float32 array}`` dict."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic at offset 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return out
