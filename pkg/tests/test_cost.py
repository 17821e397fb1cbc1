import csv

import numpy as np
import pytest

from phd_transformer.attnmask import MaskSpec, Variant, build_mask
from phd_transformer.cost import (
    A100, COLUMNS, HardwareModel, compare_variants, cost_laws, decode_cost, decode_latency_ratio,
    microbench, param_counts, prefill_cost, reference_550m, write_cost_csv,
)
from phd_transformer.engine import DecodeState, decode_step, prefill
from phd_transformer.model import init_weights

from conftest import representative_specs, tiny_config

CSWA_256 = MaskSpec(Variant.PHD_CSWA, 256, 16, 32)


class TestParams:
    def test_reference_model_size(self):
        pc = param_counts(reference_550m())
        assert 545e6 < pc.body + pc.head < 556e6

    def test_tiny_counts_match_weights(self):
        cfg = tiny_config()
        w = init_weights(cfg)
        assert param_counts(cfg).total == sum(p.data.size for _, p in w.items())


class TestHardware:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            HardwareModel(0, 1)
        with pytest.raises(ValueError):
            HardwareModel(1, -1)

    def test_roofline(self):
        hw = HardwareModel(100.0, 10.0)
        cfg = tiny_config()
        r = decode_cost(cfg, MaskSpec(), 4, hw)
        assert r.modeled_latency == max(r.flops_total / 100.0, (r.bytes_weights_read + r.bytes_kv_read) / 10.0)


class TestVanillaByHand:
    def test_prefill(self):
        cfg = tiny_config()
        pc = param_counts(cfg)
        r = prefill_cost(cfg, MaskSpec(), 6)
        assert r.tokens_forwarded == 6 and r.attn_score_entries == 21
        assert r.flops_attention == 4 * cfg.d_head * cfg.n_heads * cfg.n_layers * 21
        assert r.flops_total == 2 * pc.body * 6 + 2 * pc.head + r.flops_attention
        assert r.kv_entries == 6

    def test_decode(self):
        cfg = tiny_config()
        r = decode_cost(cfg, MaskSpec(), 6)
        assert r.tokens_forwarded == 1 and r.attn_score_entries == 7 and r.kv_entries == 6


class TestAgainstEngine:
    @pytest.mark.parametrize("spec", representative_specs())
    @pytest.mark.parametrize("t", [1, 5, 9])
    def test_counters(self, spec, t):
        w = init_weights(tiny_config(spec))
        L = w.config.n_layers
        cache, _ = prefill(w, np.arange(t))
        pre = prefill_cost(w.config, spec, t)
        assert cache.prefill_tokens == pre.tokens_forwarded
        assert cache.final_copy_tokens == pre.final_copy_tokens
        assert cache.score_entries == L * pre.attn_score_entries
        assert cache.main_entries() + cache.hidden_entries() == pre.kv_entries
        before = cache.score_entries
        dec = decode_cost(w.config, spec, t)
        decode_step(w, DecodeState(cache), 1)
        assert cache.score_entries - before == L * dec.attn_score_entries

    @pytest.mark.parametrize("spec", representative_specs())
    def test_decode_entries_equal_mask_rows(self, spec):
        t = 7
        m = build_mask(spec, t + 1)
        K = spec.K
        assert decode_cost(tiny_config(), spec, t).attn_score_entries == int(m[t * K:].sum())


class TestLaws:
    def test_all_laws_hold(self):
        laws = cost_laws(reference_550m(), [1, 2, 3, 4, 8], [1, 31, 32, 33, 128, 1000])
        assert laws and all(ok for _, ok in laws), [name for name, ok in laws if not ok]

    def test_naive_entries_quadratic_in_k_and_t(self):
        cfg = tiny_config()
        for K in (2, 4):
            for t in (16, 64):
                e = prefill_cost(cfg, MaskSpec(Variant.NAIVE_REPEAT, K), t).attn_score_entries
                assert e == (K * t) * (K * t + 1) // 2

    def test_cswa_k256_short_context(self):
        for t in (1, 32, 64, 128):
            assert decode_latency_ratio(reference_550m(), CSWA_256, t, A100, 2) <= 1.25

    def test_cswa_k256_long_context_exceeds(self):
        # all 256 copies read the full originals cache, so the ratio grows with context
        assert decode_latency_ratio(reference_550m(), CSWA_256, 2048, A100, 2) > 1.25


class TestCsv:
    def test_header_and_rows(self, tmp_path):
        reports = compare_variants(tiny_config(), [MaskSpec(), MaskSpec(Variant.PHD_SWA, 2, 4)], [4, 8])
        write_cost_csv(reports, tmp_path / "c.csv", {"note": ["x"] * len(reports)})
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == list(COLUMNS) + ["note"]
        assert len(rows) == 1 + 2 * 2 * 2
        assert rows[1][COLUMNS.index("C")] == ""

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            compare_variants(tiny_config(), [], [4])


def test_microbench_returns_positive_medians():
    w = init_weights(tiny_config(MaskSpec(Variant.PHD, 2)))
    m = microbench(w, MaskSpec(Variant.PHD, 2), 8, reps=2)
    assert m["prefill_s"] > 0 and m["decode_s"] > 0


def test_cswa_ratio_monotone_in_k_and_bounded():
    cfg = reference_550m()
    ratios = [decode_latency_ratio(cfg, MaskSpec(Variant.PHD_CSWA, K, 16, 32), 512, A100, 2)
              for K in (1, 2, 4, 16, 64, 256)]
    assert ratios == sorted(ratios)
    assert all(r <= K for r, K in zip(ratios, (1, 2, 4, 16, 64, 256)))


@pytest.mark.parametrize("spec", representative_specs())
def test_decode_kv_entries_by_variant(spec):
    t = 10
    r = decode_cost(tiny_config(), spec, t)
    if spec.variant is Variant.NAIVE_REPEAT:
        assert r.kv_entries == spec.K * t
    elif spec.variant is Variant.PHD_SWA:
        assert r.kv_entries == t + min(spec.W, (spec.K - 1) * t)
    elif spec.variant in (Variant.PHD, Variant.VANILLA):
        assert r.kv_entries == t
