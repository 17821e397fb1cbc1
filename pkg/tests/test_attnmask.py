import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phd_transformer.attnmask import (
    Layout, MaskSpec, SpecError, TokenCoord, Variant, attend, build_mask, chunk_of, is_attendable,
    layout_permutation, mask_stats, read_pgm, row_count, slot_coords, validate_spec, window_size,
    write_pgm, write_stats_csv, STATS_COLUMNS,
)

from conftest import oracle_mask, representative_specs


class TestMaskSpec:
    @pytest.mark.parametrize("name", ["Vanilla-1", "PHD-3", "NaiveRepeat-4", "PHD-SWA-3-16-inf", "PHD-CSWA-3-16-32"])
    def test_name_round_trip(self, name):
        assert MaskSpec.parse(name).name == name

    def test_infinity_symbol_accepted(self):
        assert MaskSpec.parse("PHD-2-0-∞") == MaskSpec(Variant.PHD, 2)
        assert MaskSpec.parse("PHD-SWA-2-16-∞").C is None

    def test_dict_omits_unbounded_chunk(self):
        d = MaskSpec(Variant.PHD_SWA, 2, 16).to_dict()
        assert "C" not in d
        assert MaskSpec.from_dict(d) == MaskSpec(Variant.PHD_SWA, 2, 16)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            MaskSpec.parse("Sparse-2")


class TestValidateSpec:
    def test_collects_every_violation(self):
        with pytest.raises(SpecError) as exc:
            validate_spec(MaskSpec(Variant.PHD, 0, -1))
        assert set(exc.value.violations) == {"K ≥ 1", "W ≥ 0", "PHD requires W = 0"}

    @pytest.mark.parametrize("spec, violation", [
        (MaskSpec(Variant.VANILLA, 2), "Vanilla requires K = 1"),
        (MaskSpec(Variant.PHD_CSWA, 2, 4), "PHD_CSWA requires a finite C"),
        (MaskSpec(Variant.PHD_CSWA, 2, 4, 0), "C ≥ 1"),
    ])
    def test_single_violation(self, spec, violation):
        with pytest.raises(SpecError) as exc:
            validate_spec(spec)
        assert exc.value.violations == [violation]

    def test_degenerate_flags(self):
        assert "K=1 degenerates to Vanilla" in validate_spec(MaskSpec(Variant.PHD, 1))
        assert "W=0 degenerates to PHD" in validate_spec(MaskSpec(Variant.PHD_SWA, 3, 0))
        assert validate_spec(MaskSpec(Variant.PHD_CSWA, 3, 16, 32)) == ()


class TestAttendRule:
    def test_frozen_phd_k2_t3(self):
        # hand-enumerated: 6 queries see 1,2,2,3,3,4 keys
        m = build_mask(MaskSpec(Variant.PHD, 2), 3)
        assert m.sum(axis=1).tolist() == [1, 2, 2, 3, 3, 4]
        assert m.sum() == 15

    def test_frozen_naive_k2_t3(self):
        assert build_mask(MaskSpec(Variant.NAIVE_REPEAT, 2), 3).sum() == 21

    def test_hidden_tokens_invisible_across_positions_in_phd(self):
        spec = MaskSpec(Variant.PHD, 3)
        assert not is_attendable(spec, 4, TokenCoord(3, 3), TokenCoord(2, 2))
        assert is_attendable(spec, 4, TokenCoord(3, 3), TokenCoord(2, 1))
        assert is_attendable(spec, 4, TokenCoord(3, 3), TokenCoord(3, 2))
        assert not is_attendable(spec, 4, TokenCoord(3, 2), TokenCoord(3, 3))

    def test_window_only_for_hidden_queries(self):
        spec = MaskSpec(Variant.PHD_SWA, 3, 4)
        assert is_attendable(spec, 4, TokenCoord(3, 2), TokenCoord(2, 3))
        assert not is_attendable(spec, 4, TokenCoord(3, 1), TokenCoord(2, 3))

    def test_window_counts_most_recent_hidden(self):
        spec = MaskSpec(Variant.PHD_SWA, 3, 3)  # window: (2,3), (2,2), (1,3)
        q = TokenCoord(3, 2)
        assert is_attendable(spec, 4, q, TokenCoord(1, 3))
        assert not is_attendable(spec, 4, q, TokenCoord(1, 2))

    def test_chunk_boundary_blocks_window(self):
        spec = MaskSpec(Variant.PHD_CSWA, 2, 8, 2)
        assert chunk_of(2, 2) == 1 and chunk_of(3, 2) == 2
        assert not is_attendable(spec, 4, TokenCoord(3, 2), TokenCoord(2, 2))
        assert is_attendable(spec, 4, TokenCoord(4, 2), TokenCoord(3, 2))

    @pytest.mark.parametrize("spec", representative_specs())
    def test_matches_oracle(self, spec):
        assert np.array_equal(build_mask(spec, 9), oracle_mask(spec, 9))

    def test_vectorized_attend_matches_scalar(self):
        spec = MaskSpec(Variant.PHD_CSWA, 3, 4, 3)
        n, j = slot_coords(6, 3)
        dense = attend(spec, n[:, None], j[:, None], n[None, :], j[None, :])
        for q in range(n.size):
            for k in range(n.size):
                assert dense[q, k] == is_attendable(spec, 6, TokenCoord(n[q], j[q]), TokenCoord(n[k], j[k]))

    def test_out_of_range_coordinates(self):
        with pytest.raises(ValueError):
            is_attendable(MaskSpec(Variant.PHD, 2), 3, TokenCoord(4, 1), TokenCoord(1, 1))


class TestDegeneracies:
    @given(t=st.integers(1, 24), K=st.integers(1, 5), C=st.integers(1, 40))
    @settings(max_examples=60, deadline=None)
    def test_reductions(self, t, K, C):
        phd = build_mask(MaskSpec(Variant.PHD, K), t)
        assert np.array_equal(build_mask(MaskSpec(Variant.PHD_SWA, K, 0), t), phd)
        W = 4
        swa = build_mask(MaskSpec(Variant.PHD_SWA, K, W), t)
        if C >= t:
            assert np.array_equal(build_mask(MaskSpec(Variant.PHD_CSWA, K, W, C), t), swa)
        if K == 1:
            assert np.array_equal(phd, np.tril(np.ones((t, t), dtype=bool)))

    @given(t=st.integers(1, 20), K=st.integers(2, 4), W=st.integers(0, 12), C=st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_masks_nest(self, t, K, W, C):
        """CSWA ⊆ SWA ⊆ NaiveRepeat and PHD ⊆ CSWA."""
        phd = build_mask(MaskSpec(Variant.PHD, K), t)
        swa = build_mask(MaskSpec(Variant.PHD_SWA, K, W), t)
        cswa = build_mask(MaskSpec(Variant.PHD_CSWA, K, W, C), t)
        naive = build_mask(MaskSpec(Variant.NAIVE_REPEAT, K), t)
        assert not (phd & ~cswa).any()
        assert not (cswa & ~swa).any()
        assert not (swa & ~naive).any()


class TestClosedForms:
    @given(t=st.integers(1, 30), K=st.integers(1, 5), W=st.integers(0, 20), C=st.integers(1, 10),
           v=st.sampled_from(list(Variant)))
    @settings(max_examples=150, deadline=None)
    def test_mask_stats_matches_enumeration(self, t, K, W, C, v):
        if v is Variant.VANILLA:
            K = 1
        if v in (Variant.VANILLA, Variant.PHD):
            W = 0
        spec = MaskSpec(v, K, W, C if v is Variant.PHD_CSWA else None)
        m = build_mask(spec, t)
        stats = mask_stats(spec, t)
        assert stats.true_entries == int(m.sum())
        assert stats.per_query_max == int(m.sum(axis=1).max())

    def test_row_count_and_window_size(self):
        spec = MaskSpec(Variant.PHD_CSWA, 3, 5, 4)
        m = build_mask(spec, 9)
        n, j = slot_coords(9, 3)
        assert np.array_equal(row_count(spec, n, j), m.sum(axis=1))
        # position 6 (chunk 2 starts at 5): one earlier position in chunk, 2 hidden copies
        assert window_size(spec, 6) == 2
        assert window_size(spec, 5) == 0

    def test_phd_count_formula(self):
        K, t = 4, 7
        assert mask_stats(MaskSpec(Variant.PHD, K), t).true_entries == K * t * (t - 1) // 2 + t * K * (K + 1) // 2


class TestLayouts:
    def test_frozen_permutation(self):
        assert layout_permutation(2, 3).grouped_to_interleaved.tolist() == [0, 3, 1, 2, 4, 5]

    @given(t=st.integers(1, 12), K=st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_grouped_is_conjugated_interleaved(self, t, K):
        spec = MaskSpec(Variant.PHD_SWA, K, 3)
        perm = layout_permutation(t, K).grouped_to_interleaved
        inter = build_mask(spec, t, Layout.INTERLEAVED)
        assert np.array_equal(build_mask(spec, t, Layout.GROUPED), inter[np.ix_(perm, perm)])

    def test_round_trip(self):
        lm = layout_permutation(5, 3)
        x = np.arange(15)
        assert np.array_equal(lm.to_interleaved(lm.to_grouped(x)), x)


class TestDumps:
    def test_pgm_round_trip(self, tmp_path):
        m = build_mask(MaskSpec(Variant.PHD_SWA, 3, 4), 8)
        write_pgm(m, tmp_path / "m.pgm")
        assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n24 24\n255\n")
        assert np.array_equal(read_pgm(tmp_path / "m.pgm"), m)

    def test_stats_csv(self, tmp_path):
        write_stats_csv(MaskSpec(Variant.PHD, 2), 3, "interleaved", tmp_path / "s.csv")
        header, row = (tmp_path / "s.csv").read_text().splitlines()
        assert header.split(",") == list(STATS_COLUMNS)
        assert dict(zip(STATS_COLUMNS, row.split(",")))["true_entries"] == "15"
