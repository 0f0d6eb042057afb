import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from winoprune import conv
from winoprune.transforms import generate_transforms, winograd_instance

import oracles


def make_layer(rng, out_ch, in_ch, ts, pad=1, sparsity=0.0):
    q = rng.normal(size=(out_ch, in_ch, ts.instance.m, ts.instance.m))
    if sparsity:
        flat = rng.permutation(q.size)
        keep = np.ones(q.size)
        keep[flat[: int(round(sparsity * q.size))]] = 0.0
        mask = keep.reshape(q.shape)
    else:
        mask = np.ones_like(q)
    return conv.WinogradConvLayer(q=q * mask, mask=mask, instance=ts.instance, pad=pad)


class TestDirectConv:
    def test_uniform_sum(self):
        x = np.ones((1, 1, 4, 4))
        w = np.ones((1, 1, 3, 3))
        assert np.array_equal(conv.direct_conv2d(x, w), np.full((1, 1, 2, 2), 9.0))

    def test_zero_weights(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = np.zeros((4, 3, 3, 3))
        assert np.all(conv.direct_conv2d(x, w, pad=1) == 0.0)

    def test_matches_naive_loop_exactly(self, rng):
        # integer-valued data keeps float64 sums exact, so the einsum path
        # must agree with the loop oracle bit for bit
        x = rng.integers(-4, 5, size=(1, 2, 8, 8)).astype(np.float64)
        w = rng.integers(-4, 5, size=(3, 2, 3, 3)).astype(np.float64)
        got = conv.direct_conv2d(x, w, pad=1)
        ref = oracles.naive_conv2d(x, w, pad=1)
        assert np.array_equal(got, ref)

    def test_shape_errors(self, rng):
        x = rng.normal(size=(1, 2, 8, 8))
        with pytest.raises(ValueError, match="channel mismatch"):
            conv.direct_conv2d(x, rng.normal(size=(3, 3, 3, 3)))
        with pytest.raises(ValueError, match="pad"):
            conv.direct_conv2d(x, rng.normal(size=(3, 2, 3, 3)), pad=-1)


class TestWeightsToWinograd:
    def test_zero_filter(self, ts23):
        q = conv.weights_to_winograd(np.zeros((2, 2, 3, 3)), ts23)
        assert np.all(q == 0.0)

    def test_identity_corner(self, ts23):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 0, 0] = 1.0
        q = conv.weights_to_winograd(w, ts23)
        assert np.allclose(q[0, 0], np.outer(ts23.g[:, 0], ts23.g[:, 0]), atol=1e-15)
        assert np.allclose(q[0, 0], ts23.s.s[:, :, 0, 0], atol=1e-15)

    def test_matches_s_reconstruction(self, ts43, rng):
        w = rng.normal(size=(3, 2, 3, 3))
        q = conv.weights_to_winograd(w, ts43)
        for o in range(3):
            for c in range(2):
                ref = oracles.q_via_s_loops(ts43.s.s, w[o, c])
                assert oracles.rel_err(q[o, c], ref) <= 1e-6

    def test_kernel_size_mismatch(self, ts23, rng):
        with pytest.raises(ValueError, match="3"):
            conv.weights_to_winograd(rng.normal(size=(1, 1, 5, 5)), ts23)


class TestTiling:
    def test_single_tile(self, ts43, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        tset = conv.tile_input(x, ts43.instance, pad=0)
        assert tset.geom.tile_count == 1
        assert np.array_equal(tset.tiles[:, :, 0], x)

    def test_edge_tiles_zero_padded(self, ts43, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        tset = conv.tile_input(x, ts43.instance, pad=0)
        assert (tset.geom.tiles_h, tset.geom.tiles_w) == (2, 2)
        # bottom-right tile covers rows/cols 4..9, of which 8..9 are padding
        tile = tset.tiles[0, 0, 3]
        assert np.array_equal(tile[:4, :4], x[0, 0, 4:, 4:])
        assert np.all(tile[4:, :] == 0.0)
        assert np.all(tile[:, 4:] == 0.0)

    def test_cifar_geometry(self, ts43, rng):
        x = rng.normal(size=(1, 1, 32, 32))
        tset = conv.tile_input(x, ts43.instance, pad=1)
        assert (tset.geom.tiles_h, tset.geom.tiles_w) == (8, 8)
        assert (tset.geom.out_h, tset.geom.out_w) == (32, 32)

    def test_too_small_input_rejected(self, ts43):
        with pytest.raises(ValueError, match="smaller than kernel"):
            conv.tile_input(np.zeros((1, 1, 2, 2)), ts43.instance, pad=0)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(5, 40), w=st.integers(5, 40), pad=st.integers(0, 2),
           m=st.sampled_from([4, 6]), seed=st.integers(0, 999))
    def test_reassembly_round_trip(self, h, w, pad, m, seed):
        """A centered delta kernel makes conv the identity, so tiling plus
        reassembly must reproduce the input."""
        ts = generate_transforms(winograd_instance(m, 3))
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 1, h, w))
        delta = np.zeros((1, 1, 3, 3))
        delta[0, 0, 1, 1] = 1.0
        layer = conv.WinogradConvLayer(
            q=conv.weights_to_winograd(delta, ts),
            mask=np.ones((1, 1, m, m)), instance=ts.instance, pad=1)
        y = conv.winograd_conv_layer(x, layer, ts)
        assert y.shape == x.shape
        assert oracles.rel_err(y, x) <= 1e-10


class TestWinogradConv:
    def test_zero_weights(self, ts23, rng):
        layer = make_layer(rng, 2, 3, ts23)
        layer.q[...] = 0.0
        x = rng.normal(size=(1, 3, 8, 8))
        assert np.all(conv.winograd_conv_layer(x, layer, ts23) == 0.0)

    @pytest.mark.parametrize("m,shape,pad", [
        (4, (2, 3, 8, 8), 1), (4, (1, 2, 7, 9), 0),
        (6, (2, 3, 32, 32), 1), (6, (1, 1, 9, 13), 2),
    ])
    def test_matches_direct_conv(self, m, shape, pad, rng):
        ts = generate_transforms(winograd_instance(m, 3))
        x = rng.normal(size=shape)
        w = rng.normal(size=(4, shape[1], 3, 3))
        layer = conv.WinogradConvLayer(q=conv.weights_to_winograd(w, ts),
                                       mask=np.ones((4, shape[1], m, m)),
                                       instance=ts.instance, pad=pad)
        got = conv.winograd_conv_layer(x, layer, ts)
        ref = conv.direct_conv2d(x, w, pad=pad)
        assert oracles.rel_err(got, ref) <= 1e-10

    def test_single_tile_matches_h_expansion(self, ts23, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        q = rng.normal(size=(1, 1, 4, 4))
        layer = conv.WinogradConvLayer(q=q, mask=np.ones_like(q),
                                       instance=ts23.instance, pad=0)
        got = conv.winograd_conv_layer(x, layer, ts23)
        ref = oracles.output_via_h(ts23.h.h, q[0, 0], x[0, 0])
        assert oracles.rel_err(got[0, 0], ref) <= 1e-12

    def test_channel_mismatch(self, ts23, rng):
        layer = make_layer(rng, 2, 3, ts23)
        with pytest.raises(ValueError, match="channel mismatch"):
            conv.winograd_conv_layer(rng.normal(size=(1, 4, 8, 8)), layer, ts23)


class TestSparsePacking:
    def test_dense_mask_count(self, ts23, rng):
        layer = make_layer(rng, 3, 2, ts23)
        sw = conv.pack_sparse(layer)
        assert sw.nnz == 3 * 2 * 16

    def test_empty_mask(self, ts23, rng):
        layer = make_layer(rng, 2, 2, ts23, sparsity=1.0)
        sw = conv.pack_sparse(layer)
        assert sw.nnz == 0
        ctr = conv.ConvCounters()
        y = conv.sparse_winograd_conv_layer(rng.normal(size=(1, 2, 8, 8)), sw,
                                            ts23, pad=1, counters=ctr)
        assert np.all(y == 0.0)
        assert ctr.elementwise_multiplies == 0

    @settings(max_examples=20, deadline=None)
    @given(sparsity=st.floats(0.0, 1.0), seed=st.integers(0, 999))
    def test_round_trip_exact(self, sparsity, seed, ts23):
        rng = np.random.default_rng(seed)
        layer = make_layer(rng, 3, 2, ts23, sparsity=sparsity)
        sw = conv.pack_sparse(layer)
        assert sw.nnz == int(layer.mask.sum())
        assert np.array_equal(conv.unpack_sparse(sw), layer.q)

    def test_inconsistent_mask_rejected(self, ts23, rng):
        layer = make_layer(rng, 2, 2, ts23)
        layer.mask[0, 0, 0, 0] = 0.0  # q left nonzero underneath
        with pytest.raises(ValueError, match="nonzero q"):
            conv.pack_sparse(layer)


class TestSparseConv:
    def test_dense_mask_identical_to_dense_path(self, ts43, rng):
        layer = make_layer(rng, 3, 2, ts43)
        x = rng.normal(size=(2, 2, 12, 12))
        dense_ctr, sparse_ctr = conv.ConvCounters(), conv.ConvCounters()
        dense = conv.winograd_conv_layer(x, layer, ts43, counters=dense_ctr)
        sparse = conv.sparse_winograd_conv_layer(x, conv.pack_sparse(layer), ts43,
                                                 pad=1, counters=sparse_ctr)
        assert oracles.rel_err(sparse, dense) <= 1e-6
        assert sparse_ctr.elementwise_multiplies == dense_ctr.elementwise_multiplies

    @pytest.mark.parametrize("sparsity", [0.25, 0.5, 0.74, 0.9])
    def test_matches_dense_at_any_density(self, sparsity, ts43, rng):
        layer = make_layer(rng, 4, 3, ts43, sparsity=sparsity)
        x = rng.normal(size=(2, 3, 16, 16))
        dense = conv.winograd_conv_layer(x, layer, ts43)
        sparse = conv.sparse_winograd_conv_layer(x, conv.pack_sparse(layer), ts43, pad=1)
        assert oracles.rel_err(sparse, dense) <= 1e-6

    def test_exact_multiply_accounting(self, ts43, rng):
        layer = make_layer(rng, 4, 4, ts43, sparsity=0.74)
        sw = conv.pack_sparse(layer)
        x = rng.normal(size=(3, 4, 18, 18))
        tiles = conv.tile_input(x, ts43.instance, pad=1).geom.tile_count
        ctr = conv.ConvCounters()
        conv.sparse_winograd_conv_layer(x, sw, ts43, pad=1, counters=ctr)
        assert ctr.elementwise_multiplies == sw.nnz * tiles * 3

    def test_fraction_of_dense_is_density(self, ts23, rng):
        total = 4 * 4 * 16
        keep = int(round(0.26 * total))
        flat = np.zeros(total)
        flat[rng.permutation(total)[:keep]] = 1.0
        mask = flat.reshape(4, 4, 4, 4)
        q = rng.normal(size=(4, 4, 4, 4)) * mask
        layer = conv.WinogradConvLayer(q=q, mask=mask, instance=ts23.instance, pad=1)
        x = rng.normal(size=(2, 4, 8, 8))
        dense_ctr, sparse_ctr = conv.ConvCounters(), conv.ConvCounters()
        conv.winograd_conv_layer(x, layer, ts23, counters=dense_ctr)
        conv.sparse_winograd_conv_layer(x, conv.pack_sparse(layer), ts23, pad=1,
                                        counters=sparse_ctr)
        assert (sparse_ctr.elementwise_multiplies * total
                == dense_ctr.elementwise_multiplies * keep)


class TestGradients:
    def test_zero_output_grad(self, ts23, rng):
        x = rng.normal(size=(1, 2, 8, 8))
        layer = make_layer(rng, 3, 2, ts23)
        tset = conv.tile_input(x, ts23.instance, pad=1)
        y = conv.winograd_conv_layer(x, layer, ts23)
        dq = conv.winograd_weight_grad(np.zeros_like(y), tset, ts23)
        dx = conv.winograd_input_grad(np.zeros_like(y), layer, ts23)
        assert np.all(dq == 0.0) and np.all(dx == 0.0)

    def test_weight_grad_finite_differences(self, ts23, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        layer = make_layer(rng, 1, 1, ts23, pad=0)
        tset = conv.tile_input(x, ts23.instance, pad=0)
        y = conv.winograd_conv_layer(x, layer, ts23)
        d_out = rng.normal(size=y.shape)
        dq = conv.winograd_weight_grad(d_out, tset, ts23)
        eps = 1e-6
        for idx in [(0, 0, i, j) for i in range(4) for j in range(4)]:
            qp, qm = layer.q.copy(), layer.q.copy()
            qp[idx] += eps
            qm[idx] -= eps
            lp = (conv.winograd_conv_layer(
                x, conv.WinogradConvLayer(qp, layer.mask, ts23.instance, 0), ts23)
                * d_out).sum()
            lm = (conv.winograd_conv_layer(
                x, conv.WinogradConvLayer(qm, layer.mask, ts23.instance, 0), ts23)
                * d_out).sum()
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - dq[idx]) / max(abs(fd), 1e-9) <= 1e-3

    def test_weight_grad_batch_linearity(self, ts43, rng):
        x = rng.normal(size=(4, 2, 9, 9))
        layer = make_layer(rng, 3, 2, ts43)
        y = conv.winograd_conv_layer(x, layer, ts43)
        d_out = rng.normal(size=y.shape)
        whole = conv.winograd_weight_grad(
            d_out, conv.tile_input(x, ts43.instance, 1), ts43)
        parts = sum(
            conv.winograd_weight_grad(
                d_out[b: b + 1], conv.tile_input(x[b: b + 1], ts43.instance, 1), ts43)
            for b in range(4))
        assert oracles.rel_err(whole, parts) <= 1e-12

    def test_input_grad_finite_differences(self, ts23, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        layer = make_layer(rng, 2, 1, ts23, pad=1)
        y = conv.winograd_conv_layer(x, layer, ts23)
        d_out = rng.normal(size=y.shape)
        dx = conv.winograd_input_grad(d_out, layer, ts23)
        eps = 1e-6
        picks = [(0, 0, rng.integers(8), rng.integers(8)) for _ in range(12)]
        for idx in picks:
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            lp = (conv.winograd_conv_layer(xp, layer, ts23) * d_out).sum()
            lm = (conv.winograd_conv_layer(xm, layer, ts23) * d_out).sum()
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - dx[idx]) / max(abs(fd), abs(dx[idx]), 1e-9) <= 1e-3

    def test_input_grad_overlap_add_vs_direct_oracle(self, ts43, rng):
        """Overlapping tiles must accumulate exactly like the non-tiled
        direct-conv backward."""
        w = rng.normal(size=(3, 2, 3, 3))
        layer = conv.WinogradConvLayer(q=conv.weights_to_winograd(w, ts43),
                                       mask=np.ones((3, 2, 6, 6)),
                                       instance=ts43.instance, pad=1)
        x = rng.normal(size=(2, 2, 12, 12))
        y = conv.winograd_conv_layer(x, layer, ts43)
        d_out = rng.normal(size=y.shape)
        got = conv.winograd_input_grad(d_out, layer, ts43)
        ref = oracles.naive_conv2d_input_grad(d_out, w, pad=1, in_h=12, in_w=12)
        assert oracles.rel_err(got, ref) <= 1e-10


def test_elementwise_multiply_ratio():
    from fractions import Fraction

    assert conv.elementwise_multiply_ratio(winograd_instance(4, 3)) == Fraction(16, 36)
    assert conv.elementwise_multiply_ratio(winograd_instance(6, 3)) == Fraction(36, 144)
