import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stforecast.attention import (
    GatedFusion,
    GroupPartition,
    GroupSpatialAttention,
    MultiHeadConfig,
    SpatialAttention,
    STAttentionBlock,
    TemporalAttention,
    TransformAttention,
    causal_mask,
    group_score_count,
    optimal_group_size,
)
from stforecast.autodiff import finite_difference_report, mean, sub, tabs
from stforecast.errors import DimensionError, PartitionError
from stforecast.layers import name_parameters


def hidden(rng, *shape):
    return rng.normal(size=shape)


class TestSpatialAttention:
    def test_matches_loop_oracle(self, rng, small_heads):
        layer = SpatialAttention(small_heads, rng)
        H, E = hidden(rng, 3, 4, 6), hidden(rng, 3, 4, 6)
        out, w = layer(H, E, return_weights=True)
        ref, ref_w = oracles.spatial(layer, H.tolist(), E.tolist(), 2)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(w, ref_w, rtol=0, atol=1e-12)

    def test_weight_layout_and_normalisation(self, rng, small_heads):
        layer = SpatialAttention(small_heads, rng)
        _, w = layer(hidden(rng, 2, 5, 4, 6), hidden(rng, 2, 5, 4, 6), return_weights=True)
        assert w.shape == (2, 5, 2, 4, 4)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
        assert layer.score_count == 16

    def test_single_vertex_attends_to_itself(self, rng, small_heads):
        layer = SpatialAttention(small_heads, rng)
        _, w = layer(hidden(rng, 2, 1, 6), hidden(rng, 2, 1, 6), return_weights=True)
        np.testing.assert_array_equal(w, 1.0)

    def test_misaligned_embedding(self, rng, small_heads):
        with pytest.raises(DimensionError):
            SpatialAttention(small_heads, rng)(hidden(rng, 2, 3, 6), hidden(rng, 2, 4, 6))

    def test_vertex_permutation_equivariance(self, rng, small_heads):
        layer = SpatialAttention(small_heads, rng)
        H, E = hidden(rng, 2, 5, 6), hidden(rng, 2, 5, 6)
        perm = rng.permutation(5)
        a = layer(H, E).data[:, perm]
        b = layer(H[:, perm], E[:, perm]).data
        np.testing.assert_allclose(a, b, atol=1e-13)


class TestTemporalAttention:
    @pytest.mark.parametrize("include_self", [True, False])
    def test_matches_loop_oracle(self, rng, small_heads, include_self):
        layer = TemporalAttention(small_heads, rng, causal=True, include_self=include_self)
        H, E = hidden(rng, 5, 3, 6), hidden(rng, 5, 3, 6)
        out, w = layer(H, E, return_weights=True)
        ref, ref_w = oracles.temporal(layer, H.tolist(), E.tolist(), 2, True, include_self)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(w, ref_w, rtol=0, atol=1e-12)

    def test_non_causal_matches_oracle(self, rng, small_heads):
        layer = TemporalAttention(small_heads, rng, causal=False)
        H, E = hidden(rng, 4, 2, 6), hidden(rng, 4, 2, 6)
        ref, _ = oracles.temporal(layer, H.tolist(), E.tolist(), 2, causal=False)
        np.testing.assert_allclose(layer(H, E).data, ref, atol=1e-12)

    def test_mask_shapes(self):
        np.testing.assert_array_equal(causal_mask(3), [[1, 0, 0], [1, 1, 0], [1, 1, 1]])
        np.testing.assert_array_equal(causal_mask(3, include_self=False), [[1, 0, 0], [1, 0, 0], [1, 1, 0]])

    def test_future_weights_exactly_zero(self, rng, small_heads):
        layer = TemporalAttention(small_heads, rng)
        _, w = layer(hidden(rng, 6, 3, 6), hidden(rng, 6, 3, 6), return_weights=True)
        assert (w[..., np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0).all()

    def test_first_step_sees_only_itself(self, rng, small_heads):
        layer = TemporalAttention(small_heads, rng)
        _, w = layer(hidden(rng, 4, 2, 6), hidden(rng, 4, 2, 6), return_weights=True)
        np.testing.assert_array_equal(w[..., 0, :], np.broadcast_to([1.0, 0, 0, 0], w[..., 0, :].shape))

    def test_single_step(self, rng, small_heads):
        layer = TemporalAttention(small_heads, rng)
        _, w = layer(hidden(rng, 1, 3, 6), hidden(rng, 1, 3, 6), return_weights=True)
        np.testing.assert_array_equal(w, 1.0)

    def test_prefix_outputs_ignore_later_inputs(self, rng, small_heads):
        layer = TemporalAttention(small_heads, rng)
        H, E = hidden(rng, 6, 3, 6), hidden(rng, 6, 3, 6)
        base = layer(H, E).data
        for t in range(6):
            H2 = H.copy()
            H2[t] += rng.normal(size=H2[t].shape)
            np.testing.assert_array_equal(layer(H2, E).data[:t], base[:t])


class TestTransformAttention:
    def test_matches_loop_oracle(self, rng, small_heads):
        layer = TransformAttention(small_heads, rng)
        H, Eh, Ef = hidden(rng, 4, 3, 6), hidden(rng, 4, 3, 6), hidden(rng, 2, 3, 6)
        out, w = layer(H, Eh, Ef, return_weights=True)
        ref, ref_w = oracles.transform(layer, H.tolist(), Eh.tolist(), Ef.tolist(), 2)
        assert out.shape == (2, 3, 6)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(w, ref_w, rtol=0, atol=1e-12)

    def test_weights_ignore_hidden_state(self, rng, small_heads):
        layer = TransformAttention(small_heads, rng)
        Eh, Ef = hidden(rng, 4, 3, 6), hidden(rng, 3, 3, 6)
        _, w1 = layer(hidden(rng, 4, 3, 6), Eh, Ef, return_weights=True)
        _, w2 = layer(1e3 * hidden(rng, 4, 3, 6), Eh, Ef, return_weights=True)
        np.testing.assert_array_equal(w1, w2)

    def test_horizon_longer_than_history(self, rng, small_heads):
        layer = TransformAttention(small_heads, rng)
        out = layer(hidden(rng, 2, 3, 6), hidden(rng, 2, 3, 6), hidden(rng, 5, 3, 6))
        assert out.shape == (5, 3, 6)

    def test_empty_history(self, rng, small_heads):
        with pytest.raises(DimensionError):
            TransformAttention(small_heads, rng)(np.zeros((0, 3, 6)), np.zeros((0, 3, 6)), hidden(rng, 2, 3, 6))


class TestGatedFusion:
    def test_matches_loop_oracle(self, rng):
        layer = GatedFusion(6, rng)
        layer.bias.data[:] = rng.normal(size=6)
        HS, HT = hidden(rng, 2, 3, 6), hidden(rng, 2, 3, 6)
        out, z = layer(HS, HT, return_gate=True)
        ref, ref_z = oracles.gated_fusion(layer, HS.tolist(), HT.tolist())
        np.testing.assert_allclose(out.data, ref, atol=1e-12)
        np.testing.assert_allclose(z, ref_z, atol=1e-12)

    def test_equal_inputs_pass_through(self, rng):
        H = hidden(rng, 2, 3, 6)
        np.testing.assert_allclose(GatedFusion(6, rng)(H, H).data, H, atol=1e-15)

    def test_gate_saturation(self, rng):
        layer = GatedFusion(4, rng)
        HS, HT = hidden(rng, 3, 4), hidden(rng, 3, 4)
        layer.W_spatial.data[:] = 0
        layer.W_temporal.data[:] = 0
        layer.bias.data[:] = 1e3
        np.testing.assert_array_equal(layer(HS, HT).data, HS)
        layer.bias.data[:] = -1e3
        np.testing.assert_array_equal(layer(HS, HT).data, HT)

    def test_output_between_inputs(self, rng):
        HS, HT = hidden(rng, 4, 5, 6), hidden(rng, 4, 5, 6)
        out = GatedFusion(6, rng)(HS, HT).data
        lo, hi = np.minimum(HS, HT), np.maximum(HS, HT)
        assert ((out >= lo - 1e-15) & (out <= hi + 1e-15)).all()

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            GatedFusion(6, rng)(hidden(rng, 2, 6), hidden(rng, 3, 6))


class TestGroupCost:
    def test_large_network_count(self):
        assert group_score_count(95, 5) == 836

    def test_four_vertices(self):
        assert optimal_group_size(4) == 2
        assert group_score_count(4, 2) == 12

    def test_single_vertex(self):
        assert optimal_group_size(1) == 1

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 7, 16, 54, 95, 128, 325, 1024])
    def test_matches_enumeration(self, n):
        assert optimal_group_size(n) == oracles.optimal_group_size(n)

    @pytest.mark.parametrize("n", [4, 16, 54, 128, 1024])
    def test_close_to_cube_root(self, n):
        root = (2 * n) ** (1 / 3)
        assert optimal_group_size(n) in (int(np.floor(root)), int(np.ceil(root)))


class TestGroupPartition:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.data())
    def test_covers_every_vertex_once(self, n, data):
        g = data.draw(st.integers(1, n))
        part = GroupPartition.random(n, g, seed=data.draw(st.integers(0, 99)))
        real = part.slots[part.slots >= 0]
        assert sorted(real.tolist()) == list(range(n))
        assert ((~part.valid).sum(axis=1) <= 1).all()
        assert part.slots.shape == (g, -(-n // g))
        np.testing.assert_array_equal(part.slots.reshape(-1)[part.scatter_index()], np.arange(n))

    def test_padding_disabled(self):
        with pytest.raises(PartitionError):
            GroupPartition.random(10, 3, allow_padding=False)

    def test_bad_group_count(self):
        with pytest.raises(PartitionError):
            GroupPartition.random(4, 5)

    def test_seeded(self):
        a, b = GroupPartition.random(20, 4, seed=9), GroupPartition.random(20, 4, seed=9)
        np.testing.assert_array_equal(a.slots, b.slots)


class TestGroupSpatialAttention:
    @pytest.mark.parametrize("n,groups", [(6, 2), (7, 3), (5, 5)])
    def test_matches_loop_oracle(self, rng, small_heads, n, groups):
        layer = GroupSpatialAttention(small_heads, GroupPartition.random(n, groups, seed=1), rng)
        H, E = hidden(rng, 2, n, 6), hidden(rng, 2, n, 6)
        ref = oracles.group_spatial(layer, H.tolist(), E.tolist(), 2)
        np.testing.assert_allclose(layer(H, E).data, ref, rtol=0, atol=1e-12)

    def test_score_count(self, rng, small_heads):
        layer = GroupSpatialAttention(small_heads, GroupPartition.random(95, 19), rng)
        layer(hidden(rng, 1, 95, 6), hidden(rng, 1, 95, 6))
        assert layer.score_count == 19 * 5 * 5 + 19 * 19 == 836

    def test_padding_slots_get_no_weight(self, rng, small_heads):
        part = GroupPartition.random(7, 3, seed=2)
        layer = GroupSpatialAttention(small_heads, part, rng)
        _, parts = layer(hidden(rng, 2, 7, 6), hidden(rng, 2, 7, 6), return_parts=True)
        w = parts["intra_weights"]
        pad = ~part.valid
        for g in range(part.groups):
            cols = np.flatnonzero(pad[g])
            if cols.size:
                assert (w[:, g, :, :, cols] == 0).all()
                rows = np.flatnonzero(~pad[g])
                np.testing.assert_allclose(w[:, g][:, :, rows].sum(-1), 1.0, atol=1e-12)

    def test_one_group_intra_equals_full(self, rng, small_heads):
        part = GroupPartition.random(6, 1, seed=0, allow_padding=False)
        layer = GroupSpatialAttention(small_heads, part, rng)
        full = SpatialAttention(small_heads, rng)
        full.load_state_dict(layer.intra.state_dict())
        H, E = hidden(rng, 3, 6, 6), hidden(rng, 3, 6, 6)
        _, parts = layer(H, E, return_parts=True)
        np.testing.assert_allclose(parts["local"].data, full(H, E).data, rtol=0, atol=1e-12)


class TestBlock:
    @pytest.mark.parametrize("variant", ["full", "NS", "NT", "NG", "NTr"])
    def test_variant_composition(self, rng, small_heads, variant):
        block = STAttentionBlock(small_heads, rng, variant=variant)
        H, E = hidden(rng, 4, 3, 6), hidden(rng, 4, 3, 6)
        out = block(H, E).data
        hs = block.spatial(H, E).data if block.spatial else None
        ht = block.temporal(H, E).data if block.temporal else None
        expected = {
            "NS": lambda: H + ht,
            "NT": lambda: H + hs,
            "NG": lambda: H + (hs + ht) / 2,
        }.get(variant, lambda: H + block.fusion(hs, ht).data)()
        np.testing.assert_allclose(out, expected, atol=1e-13)

    def test_block_matches_oracle_composition(self, rng, small_heads):
        block = STAttentionBlock(small_heads, rng)
        H, E = hidden(rng, 3, 3, 6), hidden(rng, 3, 3, 6)
        hs, _ = oracles.spatial(block.spatial, H.tolist(), E.tolist(), 2)
        ht, _ = oracles.temporal(block.temporal, H.tolist(), E.tolist(), 2)
        fused, _ = oracles.gated_fusion(block.fusion, hs, ht)
        np.testing.assert_allclose(block(H, E).data, H + np.array(fused), atol=1e-12)

    def test_gradient_check_at_small_step(self, rng):
        block = STAttentionBlock(MultiHeadConfig(2, 4), rng)
        name_parameters(block)
        H, E, T = hidden(rng, 2, 4, 5, 8), hidden(rng, 2, 4, 5, 8), hidden(rng, 2, 4, 5, 8)
        report = finite_difference_report(
            lambda: mean(tabs(sub(block(H, E), T))), block.parameters(), step=1e-5, per_param=8, seed=1
        )
        assert report["max_rel_error"] < 1e-4
        assert len({row[0] for row in report["checked"]}) == len(block.parameters())

    def test_unknown_variant(self, rng, small_heads):
        with pytest.raises(ValueError):
            STAttentionBlock(small_heads, rng, variant="NX")
