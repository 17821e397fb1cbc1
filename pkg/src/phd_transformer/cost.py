"""Closed-form FLOP / KV / traffic accounting and a roofline latency model.

Conventions:

* A matmul with P parameters costs ``2 * P`` FLOPs per token.
* Attention costs ``2 * d_head`` FLOPs per (query, key) score for QK and the
  same again for AV, per query head and layer.
* Only the slot whose logits are needed pays for the unembedding: one slot
  per prefill, one (the final copy) per decode step.
* Latency is ``max(flops / peak_flops, bytes / mem_bandwidth)``.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attnmask import MaskSpec, Variant, mask_stats, row_count, validate_spec, window_sum
from .model import ModelConfig, Weights


@dataclass(frozen=True)
class HardwareModel:
    peak_flops: float
    mem_bandwidth: float
    name: str = "custom"

    def __post_init__(self):
        if not (self.peak_flops > 0 and self.mem_bandwidth > 0):
            raise ValueError("peak_flops and mem_bandwidth must be > 0")


# bf16 dense tensor-core peak and HBM bandwidth of an 80GB SXM part
A100 = HardwareModel(312e12, 2.039e12, "A100-80GB")

# desk CPU, order of magnitude only
LAPTOP = HardwareModel(1e11, 2e10, "laptop")


def reference_550m() -> ModelConfig:
    """Shape of the 550M ablation model: 16 layers, d=1536, 16 q / 4 kv heads.

    The quoted FFN size of 8192 is read as the fused gate+up width, i.e. 4096
    per SwiGLU matrix; with a ~100k vocabulary that lands at ~550M parameters.
    """
    return ModelConfig(n_layers=16, d_model=1536, n_heads=16, n_kv_heads=4, d_ffn=4096,
                       vocab_size=100352, max_t=8192, rope_theta=10000.0, dtype="f32")


_DTYPE_BYTES = {"f64": 8, "f32": 4}


@dataclass(frozen=True)
class ParamCounts:
    body: int      # per-token matmul parameters of all blocks
    head: int      # unembedding
    embed: int
    norms: int

    @property
    def total(self) -> int:
        return self.body + self.head + self.embed + self.norms


def param_counts(cfg: ModelConfig) -> ParamCounts:
    d, dh, f = cfg.d_model, cfg.d_head, cfg.d_ffn
    attn = d * cfg.n_heads * dh * 2 + d * cfg.n_kv_heads * dh * 2
    ffn = 3 * d * f
    return ParamCounts(
        body=cfg.n_layers * (attn + ffn),
        head=d * cfg.vocab_size,
        embed=d * cfg.vocab_size,
        norms=(2 * cfg.n_layers + 1) * d,
    )


def kv_entry_bytes(cfg: ModelConfig, dtype_bytes: int) -> int:
    """Bytes of one cached position (K and V) summed over all layers."""
    return 2 * cfg.n_kv_heads * cfg.d_head * dtype_bytes * cfg.n_layers


COLUMNS = (
    "variant", "K", "W", "C", "t", "phase", "tokens_forwarded", "final_copy_tokens",
    "attn_score_entries", "flops_attention", "flops_total", "kv_entries",
    "bytes_weights_read", "bytes_kv_read", "modeled_latency",
)


@dataclass(frozen=True)
class CostReport:
    variant: str
    K: int
    W: int
    C: int | None
    t: int
    phase: str
    tokens_forwarded: int
    final_copy_tokens: int
    attn_score_entries: int
    flops_attention: int
    flops_total: int
    kv_entries: int
    bytes_weights_read: int
    bytes_kv_read: int
    modeled_latency: float

    def row(self) -> list:
        d = dataclasses.asdict(self)
        if d["C"] is None:
            d["C"] = ""
        return [d[c] for c in COLUMNS]


def resident_hidden(spec: MaskSpec, positions: int) -> int:
    """Hidden entries per layer held after ``positions`` positions were processed."""
    K = spec.K
    if K == 1 or positions == 0:
        return 0
    if spec.variant is Variant.NAIVE_REPEAT:
        return (K - 1) * positions
    W = spec.effective_window
    C = spec.effective_chunk
    live = positions if C is None else (positions - 1) % C + 1
    return min(W, (K - 1) * live)


def _hidden_prefill_positions(spec: MaskSpec, t: int) -> tuple[int, int]:
    """(first, count) of positions whose hidden copies are forwarded at prefill."""
    if spec.K == 1:
        return t, 0
    W, C = spec.effective_window, spec.effective_chunk
    if W == 0:
        return t, 1
    if C is None:
        return 1, t
    last = (t - 1) % C + 1
    return t - last + 1, last


def _latency(flops: int, nbytes: int, hw: HardwareModel) -> float:
    return max(flops / hw.peak_flops, nbytes / hw.mem_bandwidth)


def _attn_flops(cfg: ModelConfig, entries: int) -> int:
    return 4 * cfg.d_head * cfg.n_heads * cfg.n_layers * entries


def prefill_cost(cfg: ModelConfig, spec: MaskSpec, t: int, hw: HardwareModel = A100,
                 dtype_bytes: int | None = None) -> CostReport:
    """Cost of processing a ``t``-token prompt up to the first next-token logits.

    ``tokens_forwarded`` counts slots whose K/V populate the cache;
    ``final_copy_tokens`` counts the hidden copies at position t that PHD
    forwards only to produce the first logits (their K/V are discarded).
    """
    validate_spec(spec)
    K = spec.K
    nb = dtype_bytes or _DTYPE_BYTES[cfg.dtype]
    pc = param_counts(cfg)
    final_copy = 0
    if spec.variant is Variant.NAIVE_REPEAT or K == 1:
        tokens = K * t
        entries = mask_stats(spec, t).true_entries
    else:
        first, count = _hidden_prefill_positions(spec, t)
        entries = t * (t + 1) // 2
        # rows (n, j), j = 2..K, for n in [first, first+count)
        last = first + count - 1
        sum_prev = (first - 1 + last - 1) * count // 2          # sum of (n - 1)
        entries += (K - 1) * sum_prev + count * (K * (K + 1) // 2 - 1)
        W = spec.effective_window
        # each forwarded run starts at a chunk (or sequence) start
        entries += (K - 1) * window_sum(W, K - 1, count)
        if W == 0:
            tokens, final_copy = t, K - 1
        else:
            tokens = t + (K - 1) * count
    kv = t + resident_hidden(spec, t)
    flops_attn = _attn_flops(cfg, entries)
    flops = 2 * pc.body * (tokens + final_copy) + 2 * pc.head + flops_attn
    bw = (pc.body + pc.head) * nb
    bkv = kv * kv_entry_bytes(cfg, nb)
    return CostReport(spec.variant.value, K, spec.W, spec.C, t, "prefill", tokens, final_copy,
                      entries, flops_attn, flops, kv, bw, bkv, _latency(flops, bw + bkv, hw))


def decode_cost(cfg: ModelConfig, spec: MaskSpec, t_context: int, hw: HardwareModel = A100,
                dtype_bytes: int | None = None) -> CostReport:
    """Cost of one decode step at position ``t_context + 1``.

    ``kv_entries`` is the per-layer cache footprint before the step, i.e.
    after ``t_context`` positions.
    """
    validate_spec(spec)
    K = spec.K
    nb = dtype_bytes or _DTYPE_BYTES[cfg.dtype]
    pc = param_counts(cfg)
    p = t_context + 1
    entries = sum(int(row_count(spec, p, j)) for j in range(1, K + 1))
    if spec.variant is Variant.NAIVE_REPEAT:
        hidden_read = (K - 1) * t_context
    else:
        C = spec.effective_chunk
        cleared = C is not None and t_context > 0 and t_context % C == 0
        hidden_read = 0 if cleared else resident_hidden(spec, t_context)
    kv = t_context + resident_hidden(spec, t_context)
    flops_attn = _attn_flops(cfg, entries)
    flops = 2 * pc.body * K + 2 * pc.head + flops_attn
    bw = (pc.body + pc.head) * nb
    bkv = (t_context + hidden_read + K) * kv_entry_bytes(cfg, nb)
    return CostReport(spec.variant.value, K, spec.W, spec.C, t_context, "decode", K, 0,
                      entries, flops_attn, flops, kv, bw, bkv, _latency(flops, bw + bkv, hw))


def compare_variants(cfg: ModelConfig, specs: Sequence[MaskSpec], t_grid: Sequence[int],
                     hw: HardwareModel = A100, dtype_bytes: int | None = None) -> list[CostReport]:
    """Prefill and decode reports for every (spec, t); prefill rows first per spec."""
    if not specs or not t_grid:
        raise ValueError("compare_variants needs non-empty specs and t_grid")
    out = []
    for spec in specs:
        for t in t_grid:
            out.append(prefill_cost(cfg, spec, t, hw, dtype_bytes))
            out.append(decode_cost(cfg, spec, t, hw, dtype_bytes))
    return out


def write_cost_csv(reports: Iterable[CostReport], path: str | Path, extra_columns: dict | None = None) -> None:
    """One row per report, columns in :data:`COLUMNS` order then ``extra_columns`` keys.

    ``extra_columns`` maps a column name to a list aligned with ``reports``.
    """
    reports = list(reports)
    extra = extra_columns or {}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(COLUMNS) + list(extra))
        for i, r in enumerate(reports):
            w.writerow(r.row() + [extra[k][i] for k in extra])


def cost_laws(cfg: ModelConfig, K_grid: Sequence[int], t_grid: Sequence[int], W: int = 16, C: int = 32,
              hw: HardwareModel = A100, dtype_bytes: int | None = None) -> list[tuple[str, bool]]:
    """Evaluate the shape laws over a (K, t) grid; returns (law, holds) pairs."""
    laws = []
    for t in t_grid:
        van = prefill_cost(cfg, MaskSpec(), t, hw, dtype_bytes)
        phd = [prefill_cost(cfg, MaskSpec(Variant.PHD, K), t, hw, dtype_bytes) for K in K_grid]
        laws.append((f"PHD prefill tokens constant in K (t={t})",
                     all(r.tokens_forwarded == van.tokens_forwarded for r in phd)))
        swa = [prefill_cost(cfg, MaskSpec(Variant.PHD_SWA, K, W), t, hw, dtype_bytes) for K in K_grid]
        laws.append((f"PHD_SWA prefill tokens = K*t (t={t})",
                     all(r.tokens_forwarded == K * t for r, K in zip(swa, K_grid))))
        cswa = [prefill_cost(cfg, MaskSpec(Variant.PHD_CSWA, K, W, C), t, hw, dtype_bytes) for K in K_grid]
        laws.append((f"PHD_CSWA prefill extra <= (K-1)*C (t={t})",
                     all(r.tokens_forwarded - van.tokens_forwarded <= (K - 1) * C
                         for r, K in zip(cswa, K_grid))))
        naive = [prefill_cost(cfg, MaskSpec(Variant.NAIVE_REPEAT, K), t, hw, dtype_bytes) for K in K_grid]
        laws.append((f"NaiveRepeat prefill attention superlinear in K (t={t})",
                     all(b.flops_attention * ka > a.flops_attention * kb
                         for a, b, ka, kb in zip(naive, naive[1:], K_grid, K_grid[1:]))))
    return laws


def decode_latency_ratio(cfg: ModelConfig, spec: MaskSpec, t_context: int, hw: HardwareModel = A100,
                         dtype_bytes: int | None = None) -> float:
    """Modeled decode latency of ``spec`` relative to Vanilla at the same context."""
    base = decode_cost(cfg, MaskSpec(), t_context, hw, dtype_bytes).modeled_latency
    return decode_cost(cfg, spec, t_context, hw, dtype_bytes).modeled_latency / base


# --------------------------------------------------------------------------
# wall-clock measurement


def microbench(weights: Weights, spec: MaskSpec, t: int, reps: int = 5, seed: int = 0) -> dict:
    """Median wall-clock seconds of prefill(t) and of one decode step after it.

    One warm-up run of each phase is excluded. BLAS is pinned to one thread
    for the duration when threadpoolctl is available.
    """
    from . import engine

    try:
        from threadpoolctl import threadpool_limits
        pinned = threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pinned = contextlib.nullcontext()
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, weights.config.vocab_size, t)
    with pinned:
        prefill_times = []
        for _ in range(reps + 1):
            t0 = time.perf_counter()
            cache, logits = engine.prefill(weights, prompt, spec)
            prefill_times.append(time.perf_counter() - t0)
        state = engine.DecodeState(cache)
        decode_times = []
        tok = int(np.argmax(logits))
        for _ in range(reps + 1):
            t0 = time.perf_counter()
            logits, state = engine.decode_step(weights, state, tok)
            decode_times.append(time.perf_counter() - t0)
            tok = int(np.argmax(logits))
    return {
        "prefill_s": statistics.median(prefill_times[1:]),
        "decode_s": statistics.median(decode_times[1:]),
    }
