"""Prefill and incremental decoding with per-variant KV retention.

Each layer keeps a main cache holding the K/V of original tokens (copy 1) for
every processed position, and a hidden store holding K/V of hidden copies:

* PHD: capacity 0, hidden K/V are dropped right after their step.
* PHD_SWA: FIFO of the ``W`` most recent hidden tokens.
* PHD_CSWA: same FIFO, emptied when a step starts a new chunk.
* NaiveRepeat: unbounded, every hidden copy is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attnmask import MaskSpec, Variant, attend, chunk_of, validate_spec, window_visible
from .model import Weights, position_ids


class _KVBuffer:
    """Append-only K/V rows with O(1) eviction from the front."""

    def __init__(self, n_kv: int, d_head: int, dtype, capacity: int | None = None):
        self.capacity = capacity
        self._k = np.empty((n_kv, 16, d_head), dtype=dtype)
        self._v = np.empty_like(self._k)
        self._c = np.empty((16, 2), dtype=np.int64)
        self._lo = 0
        self._hi = 0

    def __len__(self) -> int:
        return self._hi - self._lo

    def _reserve(self, extra: int) -> None:
        live = len(self)
        if self._hi + extra <= self._c.shape[0]:
            return
        size = max(16, self._c.shape[0])
        while live + extra > size:
            size *= 2
        k = np.empty((self._k.shape[0], size, self._k.shape[2]), dtype=self._k.dtype)
        v = np.empty_like(k)
        c = np.empty((size, 2), dtype=np.int64)
        k[:, :live] = self._k[:, self._lo:self._hi]
        v[:, :live] = self._v[:, self._lo:self._hi]
        c[:live] = self._c[self._lo:self._hi]
        self._k, self._v, self._c = k, v, c
        self._lo, self._hi = 0, live

    def append(self, k: np.ndarray, v: np.ndarray, coords: np.ndarray) -> None:
        n = coords.shape[0]
        self._reserve(n)
        self._k[:, self._hi:self._hi + n] = k
        self._v[:, self._hi:self._hi + n] = v
        self._c[self._hi:self._hi + n] = coords
        self._hi += n
        if self.capacity is not None and len(self) > self.capacity:
            self._lo = self._hi - self.capacity

    def clear(self) -> None:
        self._lo = self._hi = 0

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, self._lo:self._hi]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, self._lo:self._hi]

    @property
    def coords(self) -> np.ndarray:
        return self._c[self._lo:self._hi]


@dataclass
class LayerCache:
    main: _KVBuffer
    hidden: _KVBuffer


@dataclass
class KvCache:
    spec: MaskSpec
    layers: list[LayerCache]
    positions: int = 0
    # instrumentation
    prefill_tokens: int = 0
    final_copy_tokens: int = 0
    tokens_forwarded: int = 0
    score_entries: int = 0
    attended: list | None = None

    @property
    def chunk(self) -> int:
        return chunk_of(self.positions, self.spec.effective_chunk) if self.positions else 0

    def main_entries(self, layer: int = 0) -> int:
        return len(self.layers[layer].main)

    def hidden_entries(self, layer: int = 0) -> int:
        return len(self.layers[layer].hidden)

    def hidden_coords(self, layer: int = 0) -> list[tuple[int, int]]:
        return [tuple(c) for c in self.layers[layer].hidden.coords.tolist()]


def hidden_capacity(spec: MaskSpec) -> int | None:
    if spec.variant is Variant.NAIVE_REPEAT:
        return None
    return spec.effective_window


def new_cache(weights: Weights, spec: MaskSpec | None = None, record: bool = False) -> KvCache:
    cfg = weights.config
    spec = spec or cfg.mask
    validate_spec(spec)
    dtype = weights["embed"].dtype
    cap = hidden_capacity(spec)
    layers = [
        LayerCache(_KVBuffer(cfg.n_kv_heads, cfg.d_head, dtype),
                   _KVBuffer(cfg.n_kv_heads, cfg.d_head, dtype, cap))
        for _ in range(cfg.n_layers)
    ]
    return KvCache(spec, layers, attended=[] if record else None)


@dataclass
class DecodeState:
    cache: KvCache
    last_token: int | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    step: int = 0


def _silu(x: np.ndarray) -> np.ndarray:
    return x * T._sigmoid(x)


def _run_block(weights: Weights, cache: KvCache, ids: np.ndarray, n: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Forward a block of new slots against the cache, then commit their K/V.

    Slots read cached originals at positions ≤ their own, cached hidden
    entries from earlier positions (hidden queries only, except NaiveRepeat),
    and each other under the mask predicate. Returns final-normed hidden
    states [S, d].
    """
    cfg = weights.config
    spec = cache.spec
    H, Hkv, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    g = H // Hkv
    S = ids.shape[0]
    angles = T.rope_angles(position_ids(n, j, spec.K, cfg.distinct_positions), dh, cfg.rope_theta)
    if spec.variant is Variant.NAIVE_REPEAT:
        reads_hidden = np.ones(S, dtype=bool)
    else:
        reads_hidden = window_visible(j)
    intra = attend(spec, n[:, None], j[:, None], n[None, :], j[None, :])

    x = weights["embed"].data[ids]
    scale = x.dtype.type(1.0 / math.sqrt(dh))
    new_kv = []
    for li, lc in enumerate(cache.layers):
        p = {k: v.data for k, v in weights.layer(li).items()}
        h = T.rmsnorm_forward(x, p["attn_norm"], x.dtype.type(cfg.norm_eps))
        q = T.rope_rotate((h @ p["wq"]).reshape(S, H, dh).transpose(1, 0, 2), angles)
        k = T.rope_rotate((h @ p["wk"]).reshape(S, Hkv, dh).transpose(1, 0, 2), angles)
        v = (h @ p["wv"]).reshape(S, Hkv, dh).transpose(1, 0, 2)
        mc, hc = lc.main.coords, lc.hidden.coords
        mask = np.concatenate([
            mc[None, :, 0] <= n[:, None],
            reads_hidden[:, None] & (hc[None, :, 0] < n[:, None]),
            intra,
        ], axis=1)
        keys = np.concatenate([lc.main.keys, lc.hidden.keys, k], axis=1)
        vals = np.concatenate([lc.main.values, lc.hidden.values, v], axis=1)
        scores = np.einsum("hgsd,hld->hgsl", q.reshape(Hkv, g, S, dh), keys) * scale
        probs = T.softmax_forward(scores, mask)
        o = np.einsum("hgsl,hld->hgsd", probs, vals).reshape(H, S, dh).transpose(1, 0, 2)
        x = x + o.reshape(S, H * dh) @ p["wo"]
        h = T.rmsnorm_forward(x, p["ffn_norm"], x.dtype.type(cfg.norm_eps))
        x = x + (_silu(h @ p["w_gate"]) * (h @ p["w_up"])) @ p["w_down"]
        new_kv.append((k, v))
        cache.score_entries += int(mask.sum())
        if li == 0 and cache.attended is not None:
            key_coords = [tuple(c) for c in mc.tolist()] + [tuple(c) for c in hc.tolist()] \
                + list(zip(n.tolist(), j.tolist()))
            for row in range(S):
                cache.attended.append(
                    ((int(n[row]), int(j[row])), [key_coords[c] for c in np.flatnonzero(mask[row])])
                )

    orig = j == 1
    coords = np.stack([n, j], axis=1)
    for lc, (k, v) in zip(cache.layers, new_kv):
        if orig.any():
            lc.main.append(k[:, orig], v[:, orig], coords[orig])
        if (~orig).any():
            lc.hidden.append(k[:, ~orig], v[:, ~orig], coords[~orig])
    cache.tokens_forwarded += S
    return T.rmsnorm_forward(x, weights["final_norm"].data, x.dtype.type(cfg.norm_eps))


def _logits(weights: Weights, h_last: np.ndarray) -> np.ndarray:
    return h_last @ weights["unembed"].data


def prefill(weights: Weights, prompt, spec: MaskSpec | None = None,
            record: bool = False) -> tuple[KvCache, np.ndarray]:
    """Process ``prompt`` and return the cache plus next-token logits [V].

    Originals are forwarded once for every position. Hidden copies are
    forwarded only where their K/V can still be read later or where they
    produce the returned logits: position t (PHD), all positions (PHD_SWA),
    the final chunk (PHD_CSWA). NaiveRepeat forwards all ``K*t`` slots in one
    causal block.
    """
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    t = prompt.shape[0]
    if t < 1:
        raise ValueError("prefill requires a non-empty prompt")
    cfg = weights.config
    if t > cfg.max_t:
        raise ValueError(f"prompt length {t} exceeds max_t={cfg.max_t}")
    cache = new_cache(weights, spec, record)
    spec = cache.spec
    K = spec.K
    pos = np.arange(1, t + 1)

    if spec.variant is Variant.NAIVE_REPEAT and K > 1:
        n = np.repeat(pos, K)
        j = np.tile(np.arange(1, K + 1), t)
        h = _run_block(weights, cache, prompt[n - 1], n, j)
        cache.prefill_tokens = K * t
    else:
        h = _run_block(weights, cache, prompt, pos, np.ones(t, dtype=np.int64))
        cache.prefill_tokens = t
        if K > 1:
            if spec.variant is Variant.PHD_SWA and spec.W > 0:
                hidden_pos = pos
            elif spec.variant is Variant.PHD_CSWA and spec.W > 0:
                first = (chunk_of(t, spec.C) - 1) * spec.C + 1
                hidden_pos = np.arange(first, t + 1)
            else:
                hidden_pos = np.array([t])
            n = np.repeat(hidden_pos, K - 1)
            j = np.tile(np.arange(2, K + 1), hidden_pos.size)
            h = _run_block(weights, cache, prompt[n - 1], n, j)
            if hidden_pos.size == 1 and spec.effective_window == 0:
                # hidden copies at t only serve the returned logits
                cache.final_copy_tokens = K - 1
            else:
                cache.prefill_tokens += (K - 1) * hidden_pos.size
    cache.positions = t
    return cache, _logits(weights, h[-1])


def decode_step(weights: Weights, state: DecodeState, token: int) -> tuple[np.ndarray, DecodeState]:
    """Feed ``token`` at the next position; returns the final copy's logits [V].

    All K copies run in one pass. Copy 1's K/V joins the main cache; copies
    2..K are pushed into the hidden store after the pass, so they are visible
    to later positions only. Under PHD_CSWA the store is emptied first when
    the position starts a new chunk.
    """
    cache = state.cache
    spec = cache.spec
    cfg = weights.config
    p = cache.positions + 1
    if p > cfg.max_t:
        raise ValueError(f"position {p} exceeds max_t={cfg.max_t}")
    if not 0 <= int(token) < cfg.vocab_size:
        raise ValueError(f"token {token} out of range")
    C = spec.effective_chunk
    if C is not None and p > 1 and chunk_of(p, C) != chunk_of(p - 1, C):
        for lc in cache.layers:
            lc.hidden.clear()
    K = spec.K
    n = np.full(K, p, dtype=np.int64)
    j = np.arange(1, K + 1)
    h = _run_block(weights, cache, np.full(K, int(token), dtype=np.int64), n, j)
    cache.positions = p
    state.last_token = int(token)
    return _logits(weights, h[-1]), state


@dataclass(frozen=True)
class Footprint:
    main_entries_per_layer: int
    hidden_entries_per_layer: int
    total_bytes: int


def kv_footprint(state) -> Footprint:
    """Resident KV entries and bytes for a DecodeState or KvCache."""
    cache = state.cache if isinstance(state, DecodeState) else state
    main = cache.main_entries(0)
    hidden = cache.hidden_entries(0)
    lc = cache.layers[0].main
    n_kv, _, dh = lc._k.shape
    entry = 2 * n_kv * dh * lc._k.dtype.itemsize * len(cache.layers)
    return Footprint(main, hidden, (main + hidden) * entry)


def _pick(logits: np.ndarray, mode: str, top_k: int, rng: np.random.Generator) -> int:
    if mode == "greedy":
        return int(np.argmax(logits))
    if mode != "top-k":
        raise ValueError(f"unknown sampling mode {mode!r}")
    k = max(1, min(top_k, logits.shape[0]))
    idx = np.argsort(-logits, kind="stable")[:k]
    z = logits[idx].astype(np.float64)
    prob = np.exp(z - z.max())
    prob /= prob.sum()
    return int(idx[rng.choice(k, p=prob)])


def generate(weights: Weights, prompt, n_tokens: int, mode: str = "greedy", top_k: int = 8,
             seed: int = 0, spec: MaskSpec | None = None, trace: list | None = None) -> list[int]:
    """Prefill ``prompt`` then emit ``n_tokens`` ids.

    ``trace`` (optional) receives one ``(step, Footprint)`` per emitted token,
    measured after the cache update that produced that token's logits.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be ≥ 1")
    cache, logits = prefill(weights, prompt, spec)
    state = DecodeState(cache, rng=np.random.default_rng(seed))
    out = []
    for i in range(n_tokens):
        tok = _pick(logits, mode, top_k, state.rng)
        out.append(tok)
        state.step += 1
        state.last_token = tok
        if trace is not None:
            trace.append((state.step, kv_footprint(state)))
        if i + 1 < n_tokens:
            logits, state = decode_step(weights, state, tok)
    return out
