"""Which (query, key) pairs may attend under each attention variant.

Tokens of the repeated sequence are addressed by ``TokenCoord(n, j)``: ``n`` is
the 1-based original position and ``j`` the 1-based copy index. Copy 1 is the
original token; copies ``j >= 2`` are hidden decoding tokens.

Rules, for a query ``(n, j)`` and key ``(m, i)``:

* PHD: ``(i == 1 and m < n) or (m == n and i <= j)``.
* PHD_SWA: PHD plus, for hidden queries, the ``W`` most recent hidden tokens
  (interleaved order) from positions strictly before ``n``.
* PHD_CSWA: as PHD_SWA, but the extra window keys must share the query's chunk,
  where ``chunk(p) = ceil(p / C)``.
* NaiveRepeat: full causal attention over the interleaved sequence.
* Vanilla: ``K == 1`` causal attention.

Two layouts order the ``K*t`` slots: interleaved ``x_1^1 .. x_1^K, x_2^1 ..``
and grouped, which puts all originals first and the hidden tokens after them
(still in interleaved order).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


class Variant(str, enum.Enum):
    VANILLA = "Vanilla"
    NAIVE_REPEAT = "NaiveRepeat"
    PHD = "PHD"
    PHD_SWA = "PHD_SWA"
    PHD_CSWA = "PHD_CSWA"


class Layout(str, enum.Enum):
    INTERLEAVED = "interleaved"
    GROUPED = "grouped"


class SpecError(ValueError):
    """A MaskSpec violates one or more invariants; ``violations`` names each."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


_NAME_PREFIX = {
    Variant.VANILLA: "Vanilla",
    Variant.NAIVE_REPEAT: "NaiveRepeat",
    Variant.PHD: "PHD",
    Variant.PHD_SWA: "PHD-SWA",
    Variant.PHD_CSWA: "PHD-CSWA",
}


@dataclass(frozen=True)
class MaskSpec:
    """Variant plus (K, W, C). ``C=None`` is an unbounded chunk."""

    variant: Variant = Variant.VANILLA
    K: int = 1
    W: int = 0
    C: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def name(self) -> str:
        """Run name in the ``model-type-K-W-C`` form, e.g. ``PHD-CSWA-3-16-32``."""
        prefix = _NAME_PREFIX[self.variant]
        if self.variant in (Variant.VANILLA, Variant.NAIVE_REPEAT, Variant.PHD):
            return f"{prefix}-{self.K}"
        chunk = "inf" if self.C is None or self.variant is Variant.PHD_SWA else str(self.C)
        return f"{prefix}-{self.K}-{self.W}-{chunk}"

    @classmethod
    def parse(cls, name: str) -> "MaskSpec":
        """Inverse of :attr:`name`; also accepts ``∞`` for an unbounded chunk."""
        for variant, prefix in sorted(_NAME_PREFIX.items(), key=lambda kv: -len(kv[1])):
            if name.startswith(prefix + "-") or name == prefix:
                rest = name[len(prefix):].lstrip("-")
                parts = rest.split("-") if rest else []
                break
        else:
            raise ValueError(f"unknown variant in {name!r}")
        try:
            k = int(parts[0]) if parts else 1
            w = int(parts[1]) if len(parts) > 1 else 0
            c = None
            if len(parts) > 2 and parts[2] not in ("inf", "∞"):
                c = int(parts[2])
        except ValueError as exc:
            raise ValueError(f"bad hyperparameters in {name!r}") from exc
        return cls(variant, k, w, c)

    def to_dict(self) -> dict:
        d = {"variant": self.variant.value, "K": self.K, "W": self.W}
        if self.C is not None:
            d["C"] = self.C
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(Variant(d["variant"]), int(d.get("K", 1)), int(d.get("W", 0)), d.get("C"))

    @property
    def vanilla_equivalent(self) -> bool:
        return self.K == 1

    @property
    def effective_window(self) -> int:
        """Window size actually applied (0 for variants without a hidden window)."""
        if self.variant in (Variant.PHD_SWA, Variant.PHD_CSWA):
            return self.W
        return 0

    @property
    def effective_chunk(self) -> int | None:
        return self.C if self.variant is Variant.PHD_CSWA else None


class TokenCoord(NamedTuple):
    n: int
    j: int


def validate_spec(spec: MaskSpec) -> tuple[str, ...]:
    """Check MaskSpec invariants.

    Returns informational flags for legal-but-degenerate forms; raises
    :class:`SpecError` naming every violated invariant.
    """
    errors = []
    if not isinstance(spec.K, int) or spec.K < 1:
        errors.append("K ≥ 1")
    if not isinstance(spec.W, int) or spec.W < 0:
        errors.append("W ≥ 0")
    if spec.C is not None and (not isinstance(spec.C, int) or spec.C < 1):
        errors.append("C ≥ 1")
    v = spec.variant
    if v is Variant.VANILLA and spec.K != 1:
        errors.append("Vanilla requires K = 1")
    if v is Variant.PHD and spec.W != 0:
        errors.append("PHD requires W = 0")
    if v is Variant.PHD_CSWA and spec.C is None:
        errors.append("PHD_CSWA requires a finite C")
    if errors:
        raise SpecError(errors)

    flags = []
    if spec.K == 1 and v is not Variant.VANILLA:
        flags.append("K=1 degenerates to Vanilla")
    if v in (Variant.PHD_SWA, Variant.PHD_CSWA) and spec.W == 0:
        flags.append("W=0 degenerates to PHD")
    if v is Variant.PHD_SWA and spec.C is not None:
        flags.append("C ignored for PHD_SWA")
    if v is Variant.NAIVE_REPEAT and (spec.W or spec.C is not None):
        flags.append("W and C ignored for NaiveRepeat")
    return tuple(flags)


def chunk_of(p, C: int | None):
    """Chunk index ``ceil(p / C)`` of 1-based position ``p`` (1 if unchunked)."""
    p = np.asarray(p)
    out = np.ones_like(p) if C is None else (p + C - 1) // C
    return out if out.ndim else int(out)


def window_visible(j):
    """Whether a query with copy index ``j`` may read the hidden-token window.

    Only hidden queries do. Letting originals read the window would make the
    originals' KV depend on hidden tokens, so CSWA prefill could no longer skip
    the hidden copies of earlier chunks.
    """
    return j >= 2


def attend(spec: MaskSpec, qn, qj, kn, ki):
    """Vectorised attendability predicate; arguments broadcast like numpy arrays."""
    qn, qj, kn, ki = (np.asarray(a) for a in (qn, qj, kn, ki))
    K = spec.K
    if spec.variant is Variant.NAIVE_REPEAT or K == 1:
        return (kn - 1) * K + ki <= (qn - 1) * K + qj
    base = ((ki == 1) & (kn < qn)) | ((kn == qn) & (ki <= qj))
    W = spec.effective_window
    if W == 0:
        return base
    # hidden tokens strictly after key (m, i) and before position n
    newer = (qn - 1 - kn) * (K - 1) + (K - ki)
    extra = window_visible(qj) & (ki >= 2) & (kn < qn) & (newer < W)
    C = spec.effective_chunk
    if C is not None:
        extra &= chunk_of(kn, C) == chunk_of(qn, C)
    return base | extra


def is_attendable(spec: MaskSpec, t: int, query: TokenCoord, key: TokenCoord) -> bool:
    validate_spec(spec)
    for c in (query, key):
        if not (1 <= c[0] <= t and 1 <= c[1] <= spec.K):
            raise ValueError(f"coordinate {tuple(c)} out of range for t={t}, K={spec.K}")
    return bool(attend(spec, query[0], query[1], key[0], key[1]))


@dataclass(frozen=True)
class LayoutMap:
    """Permutation between grouped and interleaved slot orders.

    ``grouped_to_interleaved[g]`` is the interleaved index of grouped slot ``g``.
    """

    t: int
    K: int
    grouped_to_interleaved: np.ndarray
    interleaved_to_grouped: np.ndarray

    def to_grouped(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        """Reorder interleaved-ordered ``x`` into grouped order along ``axis``."""
        return np.take(x, self.grouped_to_interleaved, axis=axis)

    def to_interleaved(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        return np.take(x, self.interleaved_to_grouped, axis=axis)


def layout_permutation(t: int, K: int) -> LayoutMap:
    if t < 1 or K < 1:
        raise ValueError("layout_permutation requires t ≥ 1 and K ≥ 1")
    originals = np.arange(t) * K
    hidden = (np.arange(t)[:, None] * K + np.arange(1, K)[None, :]).reshape(-1)
    perm = np.concatenate([originals, hidden]).astype(np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return LayoutMap(t, K, perm, inv)


def slot_coords(t: int, K: int, layout: Layout | str = Layout.INTERLEAVED) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot (n, j) arrays, 1-based, in the requested layout order."""
    n = np.repeat(np.arange(1, t + 1), K)
    j = np.tile(np.arange(1, K + 1), t)
    if Layout(layout) is Layout.GROUPED:
        perm = layout_permutation(t, K).grouped_to_interleaved
        n, j = n[perm], j[perm]
    return n, j


def build_mask(spec: MaskSpec, t: int, layout: Layout | str = Layout.INTERLEAVED) -> np.ndarray:
    """Boolean [K*t, K*t] matrix; entry (q, k) is True when query slot q may read key slot k."""
    validate_spec(spec)
    if t < 1:
        raise ValueError("build_mask requires t ≥ 1")
    n, j = slot_coords(t, spec.K, layout)
    return attend(spec, n[:, None], j[:, None], n[None, :], j[None, :])


def window_size(spec: MaskSpec, n):
    """Number of window keys a hidden query at position ``n`` reads (0 if none)."""
    n = np.asarray(n)
    W = spec.effective_window
    if W == 0 or spec.K == 1:
        return np.zeros_like(n)
    C = spec.effective_chunk
    earlier = n - 1 if C is None else (n - 1) % C
    return np.minimum(W, (spec.K - 1) * earlier)


def row_count(spec: MaskSpec, n, j):
    """Closed-form number of keys read by query (n, j)."""
    n, j = np.asarray(n), np.asarray(j)
    K = spec.K
    if spec.variant is Variant.NAIVE_REPEAT or K == 1:
        out = (n - 1) * K + j
    else:
        out = (n - 1) + j + np.where(j >= 2, window_size(spec, n), 0)
    return out if out.ndim else int(out)


def window_sum(W: int, a: int, length: int) -> int:
    """sum_{e=0}^{length-1} min(W, a*e)."""
    if length <= 0 or a == 0 or W == 0:
        return 0
    e_star = -(-W // a)  # first e with a*e >= W
    below = min(e_star, length)
    return a * below * (below - 1) // 2 + W * max(0, length - e_star)


@dataclass(frozen=True)
class MaskStats:
    true_entries: int
    per_query_max: int


def mask_stats(spec: MaskSpec, t: int) -> MaskStats:
    """True-entry count and widest row of ``build_mask(spec, t)``, in closed form."""
    validate_spec(spec)
    K = spec.K
    if spec.variant is Variant.NAIVE_REPEAT or K == 1:
        L = K * t
        return MaskStats(L * (L + 1) // 2, L)
    base = K * t * (t - 1) // 2 + t * K * (K + 1) // 2
    W, a, C = spec.effective_window, K - 1, spec.effective_chunk
    if C is None:
        windows = window_sum(W, a, t)
    else:
        q, r = divmod(t, C)
        windows = q * window_sum(W, a, C) + window_sum(W, a, r)
    # a row is widest at the end of the sequence or at the end of the last full chunk
    candidates = [t]
    if C is not None and t >= C:
        candidates.append(C * (t // C))
    widest = max(int(row_count(spec, n, K)) for n in candidates)
    return MaskStats(base + a * windows, widest)


def rows_entries(spec: MaskSpec, positions, copies) -> int:
    """Sum of row counts over the given query coordinates."""
    return int(np.sum(row_count(spec, positions, copies)))


# --------------------------------------------------------------------------
# mask dump


def write_pgm(mask: np.ndarray, path: str | Path) -> None:
    """Binary PGM (P5): one pixel per (query, key); 255 attendable, 0 masked."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return pixels.reshape(h, w) == 255


STATS_COLUMNS = ("variant", "K", "W", "C", "t", "layout", "true_entries", "per_query_max", "dense_entries")


def write_stats_csv(spec: MaskSpec, t: int, layout: Layout | str, path: str | Path) -> MaskStats:
    stats = mask_stats(spec, t)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(STATS_COLUMNS)
        w.writerow([
            spec.variant.value, spec.K, spec.W, "" if spec.C is None else spec.C,
            t, Layout(layout).value, stats.true_entries, stats.per_query_max,
            (spec.K * t) ** 2,
        ])
    return stats


__all__ = [
    "Variant", "Layout", "MaskSpec", "TokenCoord", "LayoutMap", "MaskStats", "SpecError",
    "validate_spec", "is_attendable", "build_mask", "layout_permutation", "mask_stats",
    "slot_coords", "attend", "row_count", "rows_entries", "window_size", "chunk_of", "write_pgm",
    "read_pgm", "write_stats_csv",
]
