"""Shared fixtures and brute-force oracles."""

from __future__ import annotations

import numpy as np
import pytest

from phd_transformer.attnmask import MaskSpec, Variant
from phd_transformer.model import ModelConfig, init_weights


def oracle_visible(spec: MaskSpec, n: int, j: int) -> set[tuple[int, int]]:
    """Keys visible to query (n, j), built by listing them one at a time.

    Originals of earlier positions, copies 1..j of the own position, and
    for hidden queries the last W hidden tokens of earlier positions (in
    sequence order), restricted to the query's chunk under PHD_CSWA.
    NaiveRepeat is plain causal attention over the interleaved sequence.
    """
    K = spec.K
    if spec.variant is Variant.NAIVE_REPEAT or K == 1:
        return {(m, i) for m in range(1, n + 1) for i in range(1, K + 1) if (m, i) <= (n, j)}
    keys = {(m, 1) for m in range(1, n)} | {(n, i) for i in range(1, j + 1)}
    W = spec.W if spec.variant in (Variant.PHD_SWA, Variant.PHD_CSWA) else 0
    if j >= 2 and W > 0:
        earlier_hidden = [(m, i) for m in range(1, n) for i in range(2, K + 1)]
        window = earlier_hidden[-W:]
        if spec.variant is Variant.PHD_CSWA:
            C = spec.C
            window = [(m, i) for m, i in window if (m - 1) // C == (n - 1) // C]
        keys |= set(window)
    return keys


def oracle_mask(spec: MaskSpec, t: int) -> np.ndarray:
    """Interleaved [K*t, K*t] mask from :func:`oracle_visible`."""
    K = spec.K
    coords = [(n, j) for n in range(1, t + 1) for j in range(1, K + 1)]
    index = {c: s for s, c in enumerate(coords)}
    mask = np.zeros((K * t, K * t), dtype=bool)
    for q, (n, j) in enumerate(coords):
        for key in oracle_visible(spec, n, j):
            mask[q, index[key]] = True
    return mask


def representative_specs() -> list[MaskSpec]:
    return [
        MaskSpec(),
        MaskSpec(Variant.NAIVE_REPEAT, 2),
        MaskSpec(Variant.NAIVE_REPEAT, 3),
        MaskSpec(Variant.PHD, 2),
        MaskSpec(Variant.PHD, 3),
        MaskSpec(Variant.PHD_SWA, 2, 1),
        MaskSpec(Variant.PHD_SWA, 3, 4),
        MaskSpec(Variant.PHD_CSWA, 2, 4, 3),
        MaskSpec(Variant.PHD_CSWA, 3, 4, 4),
    ]


def tiny_config(spec: MaskSpec | None = None, **kw) -> ModelConfig:
    base = dict(n_layers=2, d_model=16, n_heads=2, n_kv_heads=1, d_ffn=32, vocab_size=32, max_t=32)
    base.update(kw)
    return ModelConfig(mask=spec or MaskSpec(), **base)


@pytest.fixture
def tiny_weights():
    def make(spec: MaskSpec | None = None, seed: int = 0, **kw):
        return init_weights(tiny_config(spec, seed=seed, **kw))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def consistency_error(weights, spec: MaskSpec, tokens, split: int) -> float:
    """Max relative gap between incremental and full-sequence final-copy logits.

    Prefills ``tokens[:split]`` then decodes the rest one token at a time; every
    returned logits vector is compared with forward_full at the same position.
    """
    from phd_transformer.engine import DecodeState, decode_step, prefill
    from phd_transformer.model import forward_full, repeat_tokens

    tokens = np.asarray(tokens)
    rseq = repeat_tokens(tokens, spec.K)
    full = forward_full(weights, rseq, spec).data[rseq.final_copy_slots()]
    cache, logits = prefill(weights, tokens[:split], spec)
    got = [logits]
    state = DecodeState(cache)
    for tok in tokens[split:]:
        logits, state = decode_step(weights, state, int(tok))
        got.append(logits)
    ref = full[split - 1:]
    got = np.stack(got)
    return float(np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
