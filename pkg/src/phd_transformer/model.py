"""Decoder-only transformer that runs over a K-fold repeated token sequence.

Pre-norm blocks: RMSNorm -> GQA attention with RoPE -> residual, RMSNorm ->
SwiGLU FFN -> residual. The attention mask comes from :mod:`attnmask`; the loss
only reads the final copy of every position.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .attnmask import Layout, MaskSpec, Variant, build_mask, layout_permutation, slot_coords, validate_spec, window_size
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 16
    n_heads: int = 2
    n_kv_heads: int = 1
    d_ffn: int = 32
    vocab_size: int = 256
    max_t: int = 64
    rope_theta: float = 10000.0
    mask: MaskSpec = field(default_factory=MaskSpec)
    seed: int = 0
    init_std: float = 0.02
    norm_eps: float = 1e-6
    # all copies of position n share RoPE position n unless this is set
    distinct_positions: bool = False
    dtype: str = "f64"

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskSpec.from_dict(self.mask)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ffn", "vocab_size", "max_t"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be ≥ 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if self.d_head % 2:
            raise ConfigError("d_head must be even for RoPE")
        if self.dtype not in T.DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(T.DTYPES)}")
        validate_spec(self.mask)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mask"] = self.mask.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def with_mask(self, spec: MaskSpec) -> "ModelConfig":
        return dataclasses.replace(self, mask=spec)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in the canonical (checkpoint) order."""
    d, dh, f = cfg.d_model, cfg.d_head, cfg.d_ffn
    shapes = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, cfg.n_heads * dh)
        shapes[p + "wk"] = (d, cfg.n_kv_heads * dh)
        shapes[p + "wv"] = (d, cfg.n_kv_heads * dh)
        shapes[p + "wo"] = (cfg.n_heads * dh, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_gate"] = (d, f)
        shapes[p + "w_up"] = (d, f)
        shapes[p + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["unembed"] = (d, cfg.vocab_size)
    return shapes


class Weights:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            params = {k: params[k] for k in expected}
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Weights":
        return Weights(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    def with_config(self, config: ModelConfig) -> "Weights":
        """Same tensors under another config (e.g. a different MaskSpec)."""
        return Weights(config, self.params)

    def astype(self, dtype: str) -> "Weights":
        cfg = dataclasses.replace(self.config, dtype=dtype)
        np_dtype = T.DTYPES[dtype]
        return Weights(
            cfg,
            {k: Tensor(v.data.astype(np_dtype), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )


def init_weights(cfg: ModelConfig) -> Weights:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dtype = T.DTYPES[cfg.dtype]
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return Weights(cfg, params)


# --------------------------------------------------------------------------
# repeated input sequence


def position_ids(n: np.ndarray, j: np.ndarray, K: int, distinct: bool = False) -> np.ndarray:
    """RoPE position of slot (n, j): ``n`` by default, interleaved rank if ``distinct``."""
    n, j = np.asarray(n), np.asarray(j)
    return (n - 1) * K + j if distinct else n.copy()


@dataclass(frozen=True)
class RepeatedSequence:
    """Originals ``tokens`` [B, t] expanded to ``K*t`` slots in ``layout`` order."""

    tokens: np.ndarray
    K: int
    layout: Layout
    n: np.ndarray
    j: np.ndarray
    position_ids: np.ndarray
    ids: np.ndarray
    batched: bool = True

    @property
    def t(self) -> int:
        return self.tokens.shape[-1]

    @property
    def n_slots(self) -> int:
        return self.K * self.t

    @property
    def coords(self) -> list[tuple[int, int]]:
        return list(zip(self.n.tolist(), self.j.tolist()))

    @property
    def layout_map(self):
        return layout_permutation(self.t, self.K)

    def slot_of(self, n: int, j: int) -> int:
        idx = (n - 1) * self.K + (j - 1)
        if self.layout is Layout.GROUPED:
            idx = int(self.layout_map.interleaved_to_grouped[idx])
        return idx

    def final_copy_slots(self) -> np.ndarray:
        """Slot index of copy K for positions 1..t, in position order."""
        return np.array([self.slot_of(n, self.K) for n in range(1, self.t + 1)], dtype=np.int64)

    def to_interleaved(self, x: np.ndarray, axis: int) -> np.ndarray:
        """Reorder slot axis ``axis`` of ``x`` into interleaved order."""
        if self.layout is Layout.INTERLEAVED:
            return x
        return self.layout_map.to_interleaved(x, axis=axis)


def repeat_tokens(tokens, K: int, layout: Layout | str = Layout.INTERLEAVED,
                  distinct_positions: bool = False) -> RepeatedSequence:
    toks = np.asarray(tokens, dtype=np.int64)
    batched = toks.ndim == 2
    if not batched:
        toks = toks[None, :]
    if toks.ndim != 2 or toks.shape[1] < 1:
        raise ValueError("repeat_tokens requires t ≥ 1")
    if K < 1:
        raise ValueError("repeat_tokens requires K ≥ 1")
    layout = Layout(layout)
    t = toks.shape[1]
    n, j = slot_coords(t, K, layout)
    ids = toks[:, n - 1]
    pos = position_ids(n, j, K, distinct_positions)
    return RepeatedSequence(toks, K, layout, n, j, pos, ids, batched)


# --------------------------------------------------------------------------
# forward pass


def _attention_dense(p: dict[str, Tensor], h: Tensor, rseq: RepeatedSequence,
                     mask: np.ndarray, cfg: ModelConfig) -> Tensor:
    B, S, _ = h.shape
    H, Hkv, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    q = T.transpose(T.reshape(T.matmul(h, p["wq"]), (B, S, H, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(h, p["wk"]), (B, S, Hkv, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(T.matmul(h, p["wv"]), (B, S, Hkv, dh)), (0, 2, 1, 3))
    q = T.rope(q, rseq.position_ids, cfg.rope_theta)
    k = T.rope(k, rseq.position_ids, cfg.rope_theta)
    k = T.repeat_heads(k, H // Hkv)
    v = T.repeat_heads(v, H // Hkv)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = T.softmax_rows(scores, mask)
    out = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, S, H * dh))
    return T.matmul(out, p["wo"])


@dataclass
class GroupedAttention:
    out: Tensor
    score_entries: int


def grouped_key_ranges(spec: MaskSpec, t: int, n: int, j: int) -> list[tuple[int, int]]:
    """Half-open grouped-layout index ranges read by query (n, j).

    Every query reads the originals prefix ``[0, n)``; hidden queries (and every
    NaiveRepeat query) additionally read one contiguous run of hidden slots.
    """
    K = spec.K
    ranges = [(0, n)]
    if K == 1:
        return ranges
    base = t + (n - 1) * (K - 1)  # grouped index of (n, 2)
    if spec.variant is Variant.NAIVE_REPEAT:
        hi = base + (j - 1)
        if hi > t:
            ranges.append((t, hi))
        return ranges
    if j >= 2:
        ranges.append((base - int(window_size(spec, n)), base + j - 1))
    return ranges


def attention_grouped(weights: Weights, layer: int, hidden, rseq: RepeatedSequence,
                      spec: MaskSpec | None = None) -> GroupedAttention:
    """Sparse attention over the grouped layout.

    The originals block (first ``t`` rows) reads only originals; the hidden
    block reads the originals prefix plus one contiguous run of hidden keys.
    Only the attended (query, key) scores are computed; ``score_entries`` counts
    them. Forward only: no gradient is recorded.
    """
    if rseq.layout is not Layout.GROUPED:
        raise ValueError("attention_grouped requires the grouped layout")
    cfg = weights.config
    spec = spec or cfg.mask
    p = weights.layer(layer)
    x = hidden.data if isinstance(hidden, Tensor) else np.asarray(hidden)
    B, S, _ = x.shape
    H, Hkv, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    g = H // Hkv
    q = (x @ p["wq"].data).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    k = (x @ p["wk"].data).reshape(B, S, Hkv, dh).transpose(0, 2, 1, 3)
    v = (x @ p["wv"].data).reshape(B, S, Hkv, dh).transpose(0, 2, 1, 3)
    angles = T.rope_angles(rseq.position_ids, dh, cfg.rope_theta)
    q = T.rope_rotate(q, angles).reshape(B, Hkv, g, S, dh)
    k = T.rope_rotate(k, angles)
    scale = x.dtype.type(1.0 / math.sqrt(dh))

    out = np.empty((B, Hkv, g, S, dh), dtype=x.dtype)
    entries = 0
    t = rseq.t
    for row in range(S):
        n, j = int(rseq.n[row]), int(rseq.j[row])
        idx = np.concatenate([np.arange(lo, hi) for lo, hi in grouped_key_ranges(spec, t, n, j)])
        entries += idx.size
        kk, vv = k[:, :, idx], v[:, :, idx]
        s = np.einsum("bhgd,bhld->bhgl", q[:, :, :, row], kk) * scale
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
        out[:, :, :, row] = np.einsum("bhgl,bhld->bhgd", s, vv)
    out = out.reshape(B, H, S, dh).transpose(0, 2, 1, 3).reshape(B, S, H * dh)
    return GroupedAttention(Tensor(out @ p["wo"].data), entries)


def forward_full(weights: Weights, rseq: RepeatedSequence, spec: MaskSpec | None = None,
                 attention: str = "dense", stats: dict | None = None) -> Tensor:
    """Logits for every slot: [B, K*t, V], or [K*t, V] for an unbatched sequence.

    ``attention="dense"`` applies the full masked score matrix and supports
    gradients; ``"grouped"`` uses :func:`attention_grouped` (grouped layout,
    forward only) and accumulates its score-entry count into ``stats``.
    """
    cfg = weights.config
    spec = spec or cfg.mask
    validate_spec(spec)
    if spec.K != rseq.K:
        raise ValueError(f"sequence repeated {rseq.K}x but mask has K={spec.K}")
    if rseq.t > cfg.max_t:
        raise ValueError(f"sequence length {rseq.t} exceeds max_t={cfg.max_t}")
    mask = build_mask(spec, rseq.t, rseq.layout) if attention == "dense" else None
    if attention not in ("dense", "grouped"):
        raise ValueError(f"unknown attention path {attention!r}")

    x = T.embedding(weights["embed"], rseq.ids)
    for i in range(cfg.n_layers):
        p = weights.layer(i)
        h = T.rmsnorm(x, p["attn_norm"], cfg.norm_eps)
        if attention == "dense":
            a = _attention_dense(p, h, rseq, mask, cfg)
        else:
            ga = attention_grouped(weights, i, h, rseq, spec)
            if stats is not None:
                stats["score_entries"] = stats.get("score_entries", 0) + ga.score_entries
            a = ga.out
        x = T.add(x, a)
        h = T.rmsnorm(x, p["ffn_norm"], cfg.norm_eps)
        x = T.add(x, T.swiglu_ffn(h, p["w_gate"], p["w_up"], p["w_down"]))
    x = T.rmsnorm(x, weights["final_norm"], cfg.norm_eps)
    logits = T.matmul(x, weights["unembed"])
    if not rseq.batched:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


def loss_final_copy(logits: Tensor, rseq: RepeatedSequence, targets) -> Tensor:
    """Cross-entropy over the copy-K slots only.

    ``targets[..., n-1]`` is the token following position n. Either ``t``
    targets or ``t-1`` (no successor for the last position) may be given.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None, :]
    B = rseq.tokens.shape[0]
    nt = targets.shape[-1]
    if targets.shape[0] != B or nt not in (rseq.t, rseq.t - 1) or nt == 0:
        raise ValueError(f"targets shape {targets.shape} does not fit t={rseq.t}, batch={B}")
    if logits.data.ndim == 2:
        logits = T.reshape(logits, (1,) + logits.shape)
    if logits.shape[1] != rseq.n_slots:
        raise ValueError(f"logits have {logits.shape[1]} slots, expected {rseq.n_slots}")
    sel = T.take(logits, rseq.final_copy_slots()[:nt], axis=1)
    sel = T.reshape(sel, (B * nt, logits.shape[-1]))
    return T.cross_entropy(sel, targets.reshape(-1))


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float | None = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def cosine_lr(step: int, total_steps: int, peak: float, warmup: int, min_ratio: float = 0.1) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``min_ratio * peak``."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    frac = min(1.0, (step - warmup) / span)
    return peak * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def adamw_update(weights: Weights, state: AdamWState, lr: float) -> float:
    """Apply one AdamW step from the accumulated ``.grad`` fields; returns the grad norm."""
    names = list(weights.params)
    grads = {k: weights[k].grad for k in names}
    for k, g in grads.items():
        if g is None:
            grads[k] = np.zeros_like(weights[k].data)
    norm = math.sqrt(sum(float(np.sum(grads[k].astype(np.float64) ** 2)) for k in names))
    clip = 1.0
    if state.grad_clip is not None and norm > state.grad_clip:
        clip = state.grad_clip / (norm + 1e-6)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k in names:
        w = weights[k]
        g = grads[k] * w.dtype.type(clip)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(w.data)
            state.v[k] = np.zeros_like(w.data)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if w.data.ndim >= 2 and state.weight_decay:
            upd = upd + state.weight_decay * w.data
        w.data = w.data - (lr * upd).astype(w.dtype)
    return norm


def train_step(weights: Weights, batch, optimizer_state: AdamWState, lr: float,
               layout: Layout | str = Layout.INTERLEAVED) -> tuple[Weights, float]:
    """Forward, backward and one AdamW update on ``batch = (inputs, targets)``.

    ``inputs`` and ``targets`` are [B, t] id arrays with ``targets[:, i]`` the
    token after ``inputs[:, i]``. Updates ``weights`` in place and returns it.
    """
    inputs, targets = (batch.inputs, batch.targets) if hasattr(batch, "inputs") else batch
    cfg = weights.config
    rseq = repeat_tokens(inputs, cfg.mask.K, layout, cfg.distinct_positions)
    weights.zero_grad()
    logits = forward_full(weights, rseq)
    loss = loss_final_copy(logits, rseq, targets)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss {value} at optimizer step {optimizer_state.step} (lr={lr})"
        )
    T.backward(loss)
    adamw_update(weights, optimizer_state, lr)
    return weights, value
