import numpy as np
import pytest

from winoprune import conv, nn
from winoprune.transforms import ImportanceMatrix

import oracles

TOPOLOGY = "conv:8,bn,relu,conv:8,bn,relu,pool,flatten,dense:10"


def small_model(rng, topology=TOPOLOGY, in_shape=(3, 16, 16)):
    return nn.build_model(topology, in_shape=in_shape, rng=rng)


def winogradify(model, ts, layer_idx):
    spatial = model.layers[layer_idx]
    q = conv.weights_to_winograd(spatial.w, ts)
    wlayer = conv.WinogradConvLayer(q=q, mask=np.ones_like(q),
                                    instance=ts.instance, pad=spatial.pad)
    model.layers[layer_idx] = nn.WinogradConv(wlayer, ts)
    return model


class TestForward:
    def test_untrained_loss_near_uniform(self, rng):
        model = small_model(rng)
        x = rng.normal(size=(32, 3, 16, 16)).astype(np.float32)
        y = rng.integers(0, 10, 32)
        loss, probs = model.forward(x, y)
        assert abs(loss - np.log(10)) <= 0.3
        assert probs.shape == (32, 10)

    def test_single_conv_model_equals_direct_conv(self, rng):
        layer = nn.SpatialConv(2, 3, pad=1, rng=rng)
        x = rng.normal(size=(2, 2, 8, 8)).astype(np.float32)
        assert np.array_equal(layer.forward(x), conv.direct_conv2d(x, layer.w, 1))

    def test_winograd_twin_equivalence(self, ts43, rng):
        model = small_model(rng)
        x = rng.normal(size=(16, 3, 16, 16)).astype(np.float32)
        y = rng.integers(0, 10, 16)
        loss_spatial, _ = model.forward(x, y)
        winogradify(winogradify(model, ts43, 0), ts43, 3)
        loss_wino, _ = model.forward(x, y)
        assert abs(loss_wino - loss_spatial) / abs(loss_spatial) <= 1e-4

    def test_loss_none_without_labels(self, rng):
        model = small_model(rng)
        loss, probs = model.forward(rng.normal(size=(4, 3, 16, 16)).astype(np.float32))
        assert loss is None and probs.shape == (4, 10)

    def test_model_requires_loss_layer(self, rng):
        with pytest.raises(ValueError, match="loss layer"):
            nn.Model([nn.Flatten()])

    def test_shape_chain_violations(self, rng):
        with pytest.raises(ValueError, match="follow flatten"):
            nn.build_model("flatten,conv:4,dense:2", in_shape=(3, 8, 8), rng=rng)
        with pytest.raises(ValueError, match="even"):
            nn.build_model("pool,flatten,dense:2", in_shape=(3, 7, 7), rng=rng)
        with pytest.raises(ValueError, match="unknown"):
            nn.build_model("conv:4,swish,flatten,dense:2", in_shape=(3, 8, 8), rng=rng)


class TestBackward:
    def test_backward_without_forward_raises(self, rng):
        model = small_model(rng)
        with pytest.raises(RuntimeError, match="without"):
            model.backward()
        model.forward(rng.normal(size=(4, 3, 16, 16)).astype(np.float32))
        with pytest.raises(RuntimeError, match="without"):
            model.backward()

    def test_gradients_match_finite_differences(self, ts23, rng):
        model = small_model(rng)
        winogradify(model, ts23, 3)
        x = rng.normal(size=(16, 3, 16, 16))
        y = rng.integers(0, 10, 16)
        oracles.grad_check_model(model, x, y, probes_per_param=8)

    def test_saturated_softmax_near_zero_gradients(self, rng):
        model = nn.Model([nn.Flatten(), nn.Dense(12, 4, rng=rng),
                          nn.SoftmaxCrossEntropy()])
        x = rng.normal(size=(8, 3, 2, 2)).astype(np.float32)
        # scale weights so logits saturate, then label the argmax class
        model.layers[1].w *= 400.0
        _, probs = model.forward(x)
        labels = probs.argmax(axis=1)
        loss, _ = model.forward(x, labels, training=True)
        model.backward()
        assert loss < 1e-5
        for name, g in model.layers[1].grads.items():
            assert np.abs(g).max() < 1e-6

    def test_maxpool_routes_gradient_to_argmax(self, rng):
        pool = nn.MaxPool2()
        # distinct values in every window, so the argmax is unambiguous
        x = rng.permutation(2 * 3 * 36).reshape(2, 3, 6, 6).astype(np.float64)
        y = pool.forward(x, training=True)
        d_out = rng.normal(size=y.shape)
        dx = pool.backward(d_out)
        win = dx.reshape(2, 3, 3, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        xwin = x.reshape(2, 3, 3, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        assert np.all((win != 0).sum(axis=1) <= 1)
        assert np.allclose(win.sum(axis=1), d_out.reshape(-1))
        hit = win != 0
        assert np.all(xwin[hit] == xwin.max(axis=1)[hit.any(axis=1)])


class TestSgd:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            nn.SgdConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            nn.SgdConfig(learning_rate=0.1, momentum=1.0)
        with pytest.raises(ValueError):
            nn.SgdConfig(learning_rate=0.1, weight_decay=-1.0)

    def _single_q_model(self, q_value, f_value, ts23):
        q = np.full((1, 1, 4, 4), q_value, dtype=np.float32)
        wlayer = conv.WinogradConvLayer(q=q, mask=np.ones_like(q),
                                        instance=ts23.instance, pad=1)
        layer = nn.WinogradConv(wlayer, ts23)
        f = np.full((4, 4), f_value)
        f.setflags(write=False)
        layer.importance = ImportanceMatrix(f=f)
        return nn.Model([layer, nn.SoftmaxCrossEntropy()]), layer

    def test_adjusted_update_magnitude(self, ts23):
        """grad 3.0, F 4, alpha 1.5, lr 1 -> update 3 / 4^1.5 = 0.375."""
        model, layer = self._single_q_model(1.0, 4.0, ts23)
        layer.grads["q"] = np.full_like(layer.wlayer.q, 3.0)
        sgd = nn.SGD(nn.SgdConfig(learning_rate=1.0, adjust_alpha=1.5))
        sgd.step(model, adjust=True)
        assert np.all(layer.wlayer.q == np.float32(1.0 - 0.375))

    def test_alpha_zero_equals_plain(self, ts23):
        model_a, layer_a = self._single_q_model(0.5, 7.0, ts23)
        model_b, layer_b = self._single_q_model(0.5, 7.0, ts23)
        g = np.random.default_rng(3).normal(size=layer_a.wlayer.q.shape).astype(np.float32)
        layer_a.grads["q"] = g.copy()
        layer_b.grads["q"] = g.copy()
        nn.SGD(nn.SgdConfig(learning_rate=0.1, adjust_alpha=0.0)).step(model_a, adjust=True)
        nn.SGD(nn.SgdConfig(learning_rate=0.1)).step(model_b, adjust=False)
        assert np.array_equal(layer_a.wlayer.q, layer_b.wlayer.q)

    def test_adjustment_preserves_sign(self, ts43, rng):
        q = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
        wlayer = conv.WinogradConvLayer(q=q.copy(), mask=np.ones_like(q),
                                        instance=ts43.instance, pad=1)
        layer = nn.WinogradConv(wlayer, ts43)
        g = rng.normal(size=q.shape).astype(np.float32)
        layer.grads["q"] = g.copy()
        model = nn.Model([layer, nn.SoftmaxCrossEntropy()])
        nn.SGD(nn.SgdConfig(learning_rate=1.0, adjust_alpha=1.5)).step(model, adjust=True)
        delta = layer.wlayer.q - q
        moved = g != 0
        assert np.all(np.sign(delta[moved]) == -np.sign(g[moved]))

    def test_masked_entries_stay_zero(self, ts23, rng):
        q = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
        mask = (rng.random(q.shape) > 0.5).astype(np.float32)
        wlayer = conv.WinogradConvLayer(q=q * mask, mask=mask,
                                        instance=ts23.instance, pad=1)
        layer = nn.WinogradConv(wlayer, ts23)
        model = nn.Model([layer, nn.SoftmaxCrossEntropy()])
        sgd = nn.SGD(nn.SgdConfig(learning_rate=0.5, momentum=0.9))
        for _ in range(4):
            layer.grads["q"] = rng.normal(size=q.shape).astype(np.float32)
            sgd.step(model, adjust=True)
            assert np.all(layer.wlayer.q[mask == 0] == 0.0)

    def test_spatial_mask_preserved(self, rng):
        layer = nn.SpatialConv(2, 2, rng=rng)
        layer.mask = (rng.random(layer.w.shape) > 0.5).astype(np.float32)
        layer.w *= layer.mask
        model = nn.Model([layer, nn.SoftmaxCrossEntropy()])
        sgd = nn.SGD(nn.SgdConfig(learning_rate=0.1, momentum=0.5, weight_decay=1e-3))
        for _ in range(3):
            layer.grads["w"] = rng.normal(size=layer.w.shape).astype(np.float32)
            sgd.step(model)
            assert np.all(layer.w[layer.mask == 0] == 0.0)


class TestTraining:
    def _data(self, n=256, seed=0):
        from winoprune import data

        ds = data.synthetic_dataset(seed, classes=4, n=n, size=16)
        return ds.images, ds.labels

    def test_training_learns(self, rng):
        x, y = self._data()
        model = nn.build_model("conv:6,bn,relu,pool,flatten,dense:4",
                               in_shape=(3, 16, 16), rng=rng)
        sgd = nn.SGD(nn.SgdConfig(learning_rate=0.05, momentum=0.9))
        rows = []
        nn.train_model(model, sgd, x, y, epochs=3, batch_size=32, rng=rng,
                       eval_data=(x, y), log_rows=rows)
        _, acc = nn.evaluate(model, x, y)
        assert acc >= 0.9
        assert len(rows) == 6  # train + eval rows per epoch

    def test_training_determinism(self):
        x, y = self._data()
        states = []
        for _ in range(2):
            rng = np.random.default_rng(7)
            model = nn.build_model("conv:6,bn,relu,pool,flatten,dense:4",
                                   in_shape=(3, 16, 16), rng=rng)
            sgd = nn.SGD(nn.SgdConfig(learning_rate=0.05, momentum=0.9))
            nn.train_model(model, sgd, x, y, epochs=2, batch_size=32, rng=rng)
            states.append(model.state_dict())
        for key in states[0]:
            assert np.array_equal(states[0][key], states[1][key]), key

    def test_divergence_raises(self, rng):
        # no batchnorm here: its scale invariance would absorb the blow-up
        x, y = self._data()
        model = nn.build_model("conv:6,relu,pool,flatten,dense:4",
                               in_shape=(3, 16, 16), rng=rng)
        sgd = nn.SGD(nn.SgdConfig(learning_rate=1e5))
        with pytest.raises(FloatingPointError), np.errstate(all="ignore"):
            nn.train_model(model, sgd, x, y, epochs=3, batch_size=32, rng=rng)

    def test_batchnorm_modes_differ(self, rng):
        bn = nn.BatchNorm(3)
        x = rng.normal(3.0, 2.0, size=(8, 3, 4, 4))
        y_train = bn.forward(x, training=True)
        y_eval = bn.forward(x, training=False)
        assert not np.allclose(y_train, y_eval)
        assert abs(y_train.mean()) < 1e-6
