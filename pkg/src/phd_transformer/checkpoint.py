"""PHDT checkpoint files.

Layout (all integers little-endian)::

    b"PHDT"
    u32  format version
    u32  config length, then that many bytes of UTF-8 JSON
    tensor records until end of file:
        u32 name length, UTF-8 name
        u32 rank, then rank x u64 extents
        u8  dtype tag (0 = f64, 1 = f32)
        raw little-endian scalars, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Weights
from .tensor import Tensor

MAGIC = b"PHDT"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_OF = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, weights: Weights, extra: dict | None = None) -> None:
    """Write ``weights`` (and optional JSON-able ``extra`` run metadata) to ``path``."""
    blob = {"model": weights.config.to_dict()}
    if extra:
        blob["extra"] = extra
    text = json.dumps(blob, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    for name, t in weights.items():
        arr = t.data
        tag = _TAG_OF[arr.dtype]
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[Weights, dict]:
    """Read a checkpoint; returns the weights and the ``extra`` metadata dict."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != MAGIC:
        raise CheckpointError("not a PHDT checkpoint (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    blob = json.loads(take(u32()).decode("utf-8"))
    config = ModelConfig.from_dict(blob["model"])
    params = {}
    while pos < len(raw):
        name = take(u32()).decode("utf-8")
        rank = u32()
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        tag = take(1)[0]
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPE_TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(shape)
        params[name] = Tensor(data.astype(dt.newbyteorder("=")), requires_grad=True)
    return Weights(config, params), blob.get("extra", {})
