import numpy as np
import pytest

from poidet import autodiff as ad
from poidet.autodiff import ShapeError, Tensor
from poidet.fusion import (aggregate_pois, fuse_poi, make_aggregation,
                           make_group_fusion)

from conftest import check_grad


def zeroed_group(channels=8, cg=4, dynamic=True):
    gp = make_group_fusion(channels, cg, dynamic, np.random.default_rng(0))
    for t in (gp.l1_w, gp.l2_w) + ((gp.b1_w, gp.b2_w) if dynamic else ()):
        t.data[...] = 0.0
    return gp


def random_group(channels=8, cg=4, dynamic=True, seed=1):
    return make_group_fusion(channels, cg, dynamic, np.random.default_rng(seed))


class TestFusePoi:
    def test_zero_cascade(self):
        # zero generating heads -> L1 = b1 = 0 -> LN(0) = 0 -> ReLU(0) = 0
        gp = zeroed_group()
        pair = Tensor(np.random.default_rng(2).normal(size=(3, 9, 8)))
        feats = Tensor(np.random.default_rng(3).normal(size=(3, 8)))
        out = fuse_poi(pair, feats, gp)
        np.testing.assert_array_equal(out.data, np.zeros((3, 9, 4)))

    def test_output_shape(self):
        gp = random_group()
        pair = Tensor(np.zeros((2, 9, 8)))
        feats = Tensor(np.zeros((2, 8)))
        assert fuse_poi(pair, feats, gp).shape == (2, 9, 4)

    def test_channel_bookkeeping_at_reference_width(self):
        # per group 2*64 -> 64 -> 64; concatenated across 4 groups the
        # totals run 512 -> 256 -> 256
        gp = random_group(channels=256, cg=64)
        assert gp.l1_w.shape == (256, 2 * 64 * 64)
        assert gp.l2_w.shape == (256, 64 * 64)
        pair = Tensor(np.zeros((1, 9, 128)))
        feats = Tensor(np.zeros((1, 256)))
        out = fuse_poi(pair, feats, gp)
        assert out.shape == (1, 9, 64)
        assert 4 * pair.shape[2] == 512 and 4 * out.shape[2] == 256

    def test_dynamic_params_vary_per_query(self):
        gp = random_group(seed=4)
        pair = Tensor(np.broadcast_to(
            np.random.default_rng(5).normal(size=(1, 9, 8)), (2, 9, 8)).copy())
        feats = Tensor(np.random.default_rng(6).normal(size=(2, 8)))
        out = fuse_poi(pair, feats, gp)
        assert not np.allclose(out.data[0], out.data[1])

    def test_static_mode_shared_across_queries(self):
        gp = random_group(dynamic=False, seed=7)
        pair = Tensor(np.broadcast_to(
            np.random.default_rng(8).normal(size=(1, 9, 8)), (2, 9, 8)).copy())
        feats = Tensor(np.random.default_rng(9).normal(size=(2, 8)))
        out = fuse_poi(pair, feats, gp)
        np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-12)

    def test_modalities_not_symmetrized(self):
        # swapping f_P and f_I changes the output unless the L1 column
        # blocks are swapped accordingly
        gp = random_group(seed=10)
        rng = np.random.default_rng(11)
        f_p = rng.normal(size=(1, 9, 4))
        f_i = rng.normal(size=(1, 9, 4))
        feats = Tensor(rng.normal(size=(1, 8)))
        out = fuse_poi(Tensor(np.concatenate([f_p, f_i], axis=2)), feats, gp)
        swapped = fuse_poi(Tensor(np.concatenate([f_i, f_p], axis=2)), feats, gp)
        assert not np.allclose(out.data, swapped.data)

    def test_swapped_inputs_with_swapped_l1_blocks_match(self):
        gp = random_group(seed=12)
        rng = np.random.default_rng(13)
        f_p = rng.normal(size=(1, 9, 4))
        f_i = rng.normal(size=(1, 9, 4))
        feats = Tensor(rng.normal(size=(1, 8)))
        out = fuse_poi(Tensor(np.concatenate([f_p, f_i], axis=2)), feats, gp)
        # swap the L1 row blocks (input channels) inside the generating head
        w = gp.l1_w.data.reshape(8, 8, 4)
        gp.l1_w.data[...] = np.concatenate([w[:, 4:, :], w[:, :4, :]],
                                           axis=1).reshape(8, 32)
        swapped = fuse_poi(Tensor(np.concatenate([f_i, f_p], axis=2)), feats, gp)
        np.testing.assert_allclose(swapped.data, out.data, atol=1e-12)

    def test_grad_through_generating_heads(self):
        rng = np.random.default_rng(14)
        pair_v = rng.normal(size=(2, 3, 8))
        feats_v = rng.normal(size=(2, 8))
        w = rng.normal(size=(2, 3, 4))
        gp = random_group(seed=15)

        def f(l1_w, b1_w, l2_w, feats, pair):
            gp.l1_w.data = l1_w.data
            gp.b1_w.data = b1_w.data
            gp.l2_w.data = l2_w.data
            local = make_group_fusion(8, 4, True, np.random.default_rng(0))
            for name in ("l1_b", "b1_b", "l2_b", "b2_w", "b2_b",
                         "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
                getattr(local, name).data[...] = getattr(gp, name).data
            local.l1_w, local.b1_w, local.l2_w = l1_w, b1_w, l2_w
            return ad.sum_all(ad.mul(fuse_poi(pair, feats, local), Tensor(w)))

        check_grad(f, [gp.l1_w.data.copy(), gp.b1_w.data.copy(),
                       gp.l2_w.data.copy(), feats_v, pair_v], tol=1e-4)


class TestAggregation:
    def test_residual_identity_with_zero_weights(self):
        agg = make_aggregation(8, 2, 9, 4, np.random.default_rng(16))
        agg.weight.data[...] = 0.0
        fused = [Tensor(np.random.default_rng(17).normal(size=(3, 9, 4)))
                 for _ in range(2)]
        feats = Tensor(np.random.default_rng(18).normal(size=(3, 8)))
        out = aggregate_pois(fused, feats, agg)
        np.testing.assert_array_equal(out.data, feats.data)

    def test_canonical_order_sensitivity(self):
        # permuting PoI order changes the output for generic weights
        agg = make_aggregation(8, 2, 9, 4, np.random.default_rng(19))
        rng = np.random.default_rng(20)
        fused = [Tensor(rng.normal(size=(1, 9, 4))) for _ in range(2)]
        feats = Tensor(rng.normal(size=(1, 8)))
        out = aggregate_pois(fused, feats, agg)
        permuted = [Tensor(f.data[:, ::-1, :].copy()) for f in fused]
        out_p = aggregate_pois(permuted, feats, agg)
        assert not np.allclose(out.data, out_p.data)

    def test_center_only_concat_length(self):
        # G=4 groups x 1 anchor x 64 channels = 256 at the reference width
        agg = make_aggregation(256, 4, 1, 64, np.random.default_rng(21))
        assert agg.weight.shape == (256, 256)
        fused = [Tensor(np.zeros((2, 1, 64))) for _ in range(4)]
        feats = Tensor(np.zeros((2, 256)))
        assert aggregate_pois(fused, feats, agg).shape == (2, 256)

    def test_wrong_poi_count_rejected(self):
        agg = make_aggregation(8, 2, 9, 4, np.random.default_rng(22))
        fused = [Tensor(np.zeros((1, 5, 4))) for _ in range(2)]
        with pytest.raises(ShapeError):
            aggregate_pois(fused, Tensor(np.zeros((1, 8))), agg)

    def test_full_block_grad(self):
        rng = np.random.default_rng(23)
        agg = make_aggregation(8, 2, 3, 4, rng)
        fused_v = [rng.normal(size=(2, 3, 4)) for _ in range(2)]
        feats_v = rng.normal(size=(2, 8))
        w = rng.normal(size=(2, 8))

        def f(f0, f1, feats, weight, bias):
            local = make_aggregation(8, 2, 3, 4, np.random.default_rng(0))
            local.weight, local.bias = weight, bias
            local.ln_gamma.data[...] = agg.ln_gamma.data
            local.ln_beta.data[...] = agg.ln_beta.data
            return ad.sum_all(ad.mul(aggregate_pois([f0, f1], feats, local),
                                     Tensor(w)))

        check_grad(f, [fused_v[0], fused_v[1], feats_v,
                       agg.weight.data.copy(), agg.bias.data.copy()], tol=1e-4)
