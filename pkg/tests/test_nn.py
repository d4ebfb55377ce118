import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from cladapt import nn
from cladapt.nn import LayerSpec, ParamEntry, ParamSet

from _archs import gradcheck_case

# -log(sigmoid(20)), evaluated with mpmath at 50 significant digits
NEG_LOG_SIGMOID_20 = 2.0611536203143807e-09


def dense_params(w, b, layer=0):
    return ParamSet([ParamEntry(layer, "weight", np.asarray(w, np.float32)),
                     ParamEntry(layer, "bias", np.asarray(b, np.float32))])


class TestForward:
    def test_identity_dense(self):
        out = nn.forward([LayerSpec("dense", in_features=2, out_features=2)],
                         dense_params(np.eye(2), [0, 0]), np.array([[3.0, -1.0]], np.float32))
        np.testing.assert_array_equal(out[-1], [[3.0, -1.0]])

    def test_relu(self):
        out = nn.forward([LayerSpec("relu")], ParamSet([]), np.array([[-2.0, 0.0, 5.0]], np.float32))
        np.testing.assert_array_equal(out[-1], [[0.0, 0.0, 5.0]])

    def test_conv_1x1_scaling(self):
        layer = LayerSpec("conv2d", in_channels=1, out_channels=1, kernel=1, stride=1)
        params = ParamSet([ParamEntry(0, "weight", np.full((1, 1, 1, 1), 2.0, np.float32)),
                           ParamEntry(0, "bias", np.zeros(1, np.float32))])
        x = np.array([[[[1, 2], [3, 4]]]], np.float32)
        np.testing.assert_array_equal(nn.forward([layer], params, x)[-1], [[[[2, 4], [6, 8]]]])

    def test_maxpool_drops_trailing_row(self):
        x = np.arange(15, dtype=np.float32).reshape(1, 1, 3, 5)
        out = nn.forward([LayerSpec("maxpool2x2")], ParamSet([]), x)[-1]
        np.testing.assert_array_equal(out, [[[[6, 8]]]])

    def test_returns_every_activation_and_does_not_mutate(self):
        layers = [LayerSpec("dense", in_features=2, out_features=3), LayerSpec("relu")]
        params = nn.init_params(layers, np.random.default_rng(0))
        before = params.copy()
        x = np.ones((4, 2), np.float32)
        acts = nn.forward(layers, params, x)
        assert len(acts) == 2
        assert params.equal(before)

    def test_shape_mismatch_names_layer(self):
        layers = [LayerSpec("dense", in_features=3, out_features=2)]
        params = nn.init_params(layers, np.random.default_rng(0))
        with pytest.raises(nn.ShapeError, match="layer 0"):
            nn.forward(layers, params, np.ones((1, 4), np.float32))

    def test_init_limits(self):
        layers = [LayerSpec("dense", in_features=10, out_features=6)]
        p = nn.init_params(layers, np.random.default_rng(1))
        limit = math.sqrt(6 / 16)
        assert np.all(np.abs(p.get(0, "weight")) <= limit)
        assert not np.any(p.get(0, "bias"))
        assert p.get(0, "weight").dtype == np.float32


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = nn.softmax_cross_entropy(np.zeros(3), 1)
        assert loss == pytest.approx(math.log(3), abs=1e-12)
        np.testing.assert_allclose(grad, [1 / 3, -2 / 3, 1 / 3], atol=1e-12)

    def test_large_margin_matches_high_precision_oracle(self):
        loss, _ = nn.softmax_cross_entropy(np.array([10.0, -10.0]), 0)
        assert loss == pytest.approx(NEG_LOG_SIGMOID_20, rel=1e-6)

    def test_batch_mean(self):
        z = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        a, _ = nn.softmax_cross_entropy(z[:1], [2])
        b, _ = nn.softmax_cross_entropy(z[1:], [0])
        both, _ = nn.softmax_cross_entropy(z, [2, 0])
        assert both == pytest.approx((a + b) / 2, rel=1e-12)

    def test_stable_for_huge_logits(self):
        loss, grad = nn.softmax_cross_entropy(np.array([1000.0, 0.0, -1000.0]), 2)
        assert loss == pytest.approx(2000.0)
        assert np.all(np.isfinite(grad))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            nn.softmax_cross_entropy(np.zeros(3), 3)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    def test_softmax_sums_to_one(self, z):
        p = nn.softmax(np.array(z))
        assert abs(p.sum() - 1.0) < 1e-6
        assert np.all(p > 0)


class TestBackprop:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_finite_differences(self, seed):
        _, res = gradcheck_case(seed, 0.0, batch=1)
        assert res.max_rel_error < 1e-4, res.worst
        assert res.checked_fraction > 0.8

    @pytest.mark.parametrize("lambda_e", [0.0, 1.0])
    def test_checker_catches_a_wrong_gradient(self, lambda_e):
        from cladapt import gradcheck, model, strategies

        rng = np.random.default_rng(0)
        arch = {"input_shape": [4], "body": [{"kind": "dense", "out": 5}, {"kind": "relu"}]}
        net = model.build_model(arch, seed=1, dtype=np.float64)
        snap = model.snapshot(model.build_model(arch, seed=2, dtype=np.float64))
        x, y = rng.uniform(size=(3, 4)), np.array([0, 1, 2])
        _, grads = strategies.lfl_loss(net, snap, x, y, lambda_e)
        g = grads.entries[0].value
        g[np.unravel_index(np.abs(g).argmax(), g.shape)] *= 1.01

        def loss_fn(p):
            return strategies.lfl_loss(net.with_params(p), snap, x, y, lambda_e)[0]

        res = gradcheck.check_gradients(loss_fn, grads, net.params)
        assert res.max_rel_error > 1e-3

    def test_all_frozen_gives_zero_grads(self):
        layers = [LayerSpec("dense", in_features=3, out_features=4), LayerSpec("relu"),
                  LayerSpec("dense", in_features=4, out_features=2)]
        p = nn.init_params(layers, np.random.default_rng(0)).with_trainable(lambda e: False)
        _, g = nn.backprop(layers, p, np.ones((2, 3), np.float32), [0, 1])
        assert not np.any(g.flat())
        assert g.structure() == p.structure()

    def test_doubling_the_loss_doubles_grads(self):
        layers = [LayerSpec("dense", in_features=3, out_features=2)]
        p = nn.init_params(layers, np.random.default_rng(3), dtype=np.float64)
        x = np.random.default_rng(4).uniform(size=(5, 3))
        y = np.array([0, 1, 1, 0, 1])
        loss, g = nn.backprop(layers, p, x, y)

        def twice(acts):
            # add CE once more through the logits gradient
            l2, dz = nn.softmax_cross_entropy(acts[-1], y)
            return l2, {0: dz}

        loss2, g2 = nn.backprop(layers, p, x, y, twice)
        assert loss2 == pytest.approx(2 * loss)
        np.testing.assert_allclose(g2.flat(), 2 * g.flat(), rtol=1e-12)

    def test_empty_batch(self):
        layers = [LayerSpec("dense", in_features=3, out_features=2)]
        p = nn.init_params(layers, np.random.default_rng(0))
        with pytest.raises(ValueError):
            nn.backprop(layers, p, np.zeros((0, 3), np.float32), [])


class TestSGD:
    def one(self, w, g, trainable=True):
        p = ParamSet([ParamEntry(0, "weight", np.array([w], np.float32), trainable)])
        return p, ParamSet([ParamEntry(0, "weight", np.array([g], np.float32), trainable)])

    def test_plain_step(self):
        p, g = self.one(1.0, 0.5)
        assert nn.sgd_step(p, g, 0.002).get(0, "weight")[0] == pytest.approx(0.999, abs=1e-7)

    def test_fixed_point(self):
        p, g = self.one(1.0, 0.0)
        assert nn.sgd_step(p, g, 0.1).equal(p)

    def test_pure_decay(self):
        p, g = self.one(1.0, 0.0)
        assert nn.sgd_step(p, g, 0.1, 0.5).get(0, "weight")[0] == pytest.approx(0.95, abs=1e-7)

    def test_frozen_untouched(self):
        p, g = self.one(1.0, 3.0, trainable=False)
        out = nn.sgd_step(p, g, 0.1, 0.5)
        assert out.get(0, "weight") is p.get(0, "weight")

    def test_lr_zero_is_noop(self):
        p, g = self.one(0.3, 3.0)
        assert nn.sgd_step(p, g, 0.0, 0.5).equal(p)

    @pytest.mark.parametrize("lr,wd", [(-0.1, 0.0), (0.1, -1.0)])
    def test_rejects_negative(self, lr, wd):
        p, g = self.one(1.0, 1.0)
        with pytest.raises(ValueError):
            nn.sgd_step(p, g, lr, wd)

    def test_structure_mismatch(self):
        p, _ = self.one(1.0, 1.0)
        g = ParamSet([ParamEntry(0, "weight", np.zeros(2, np.float32))])
        with pytest.raises(RuntimeError):
            nn.sgd_step(p, g, 0.1)


class TestDeterminism:
    def run(self, seed, steps=20):
        layers = [LayerSpec("dense", in_features=4, out_features=5), LayerSpec("relu"),
                  LayerSpec("dense", in_features=5, out_features=3)]
        rng = np.random.default_rng(seed)
        p = nn.init_params(layers, rng)
        for _ in range(steps):
            x = rng.uniform(size=(4, 4)).astype(np.float32)
            y = rng.integers(0, 3, size=4)
            _, g = nn.backprop(layers, p, x, y)
            p = nn.sgd_step(p, g, 0.05, 1e-4)
        return p

    def test_same_seed_same_bits(self):
        assert self.run(5).equal(self.run(5))
        assert not self.run(5).equal(self.run(6))

    def test_frozen_layer_never_moves(self):
        layers = [LayerSpec("dense", in_features=4, out_features=3)]
        rng = np.random.default_rng(0)
        p = nn.init_params(layers, rng).with_trainable(lambda e: e.role == "weight")
        b0 = p.get(0, "bias").copy()
        for _ in range(50):
            _, g = nn.backprop(layers, p, rng.uniform(size=(3, 4)).astype(np.float32), [0, 1, 2])
            p = nn.sgd_step(p, g, 0.1, 0.01)
        assert p.get(0, "bias").tobytes() == b0.tobytes()
