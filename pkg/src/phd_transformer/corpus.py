"""Byte-level corpus: loading, train/validation split and seeded batching."""

from __future__ import annotations

import sysconfig
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

VOCAB_SIZE = 256
PAD_ID = 256  # sentinel; never emitted by batching and never scored


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Corpus:
    data: np.ndarray  # uint8
    boundary: int     # first validation byte
    seq_len: int

    @property
    def train(self) -> np.ndarray:
        return self.data[:self.boundary]

    @property
    def val(self) -> np.ndarray:
        return self.data[self.boundary:]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray   # [B, L] int64
    targets: np.ndarray  # [B, L] int64, inputs shifted left by one


def split_bytes(data: bytes | np.ndarray, val_fraction: float, seq_len: int) -> Corpus:
    data = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if not 0.0 < val_fraction < 1.0:
        raise CorpusError("val_fraction must lie in (0, 1)")
    if data.size == 0:
        raise CorpusError("corpus is empty")
    if data.size < seq_len + 1:
        raise CorpusError(f"corpus too small: {data.size} bytes < seq_len+1 = {seq_len + 1}")
    boundary = int((1.0 - val_fraction) * data.size) // seq_len * seq_len
    if boundary < seq_len + 1 or data.size - boundary < seq_len:
        raise CorpusError(
            f"corpus too small for seq_len={seq_len} at val_fraction={val_fraction}"
        )
    return Corpus(data, boundary, seq_len)


def load_corpus(path: str | Path, val_fraction: float = 0.1, seq_len: int = 128) -> Corpus:
    """Read ``path`` verbatim as bytes; the split boundary is a multiple of ``seq_len``."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    return split_bytes(path.read_bytes(), val_fraction, seq_len)


def next_batch(corpus: Corpus, seq_len: int, batch_size: int, rng: np.random.Generator) -> Batch:
    """``batch_size`` windows of ``seq_len + 1`` bytes drawn uniformly from the train split."""
    train = corpus.train
    if seq_len + 1 > train.size:
        raise CorpusError("train split shorter than seq_len + 1")
    starts = rng.integers(0, train.size - seq_len, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    win = train[idx].astype(np.int64)
    return Batch(win[:, :-1], win[:, 1:])


def val_windows(corpus: Corpus, seq_len: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Consecutive non-overlapping validation windows, in order.

    Each yields ``seq_len`` inputs and the ``seq_len - 1`` targets that stay
    inside the window.
    """
    L = seq_len or corpus.seq_len
    val = corpus.val.astype(np.int64)
    for start in range(0, val.size - L + 1, L):
        win = val[start:start + L]
        yield win, win[1:]


def stdlib_corpus(n_bytes: int = 1 << 20) -> bytes:
    """About ``n_bytes`` of Python standard-library source, in sorted file order.

    Used as a local stand-in text corpus when no corpus file is supplied.
    """
    root = Path(sysconfig.get_paths()["stdlib"])
    out = bytearray()
    for f in sorted(root.glob("*.py")):
        out += f.read_bytes()
        if len(out) >= n_bytes:
            break
    return bytes(out[:n_bytes])
