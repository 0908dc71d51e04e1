"""Gradient and optimizer checks for the numpy net toolkit.

Every layer's backward pass is compared against central finite differences
in float64; a wrong formula anywhere would poison all downstream training.
"""

import numpy as np
import pytest

from fewsar import nets


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def check_layer(layer, x, rtol=1e-5, atol=1e-7):
    """Compare analytic input/parameter gradients with finite differences
    of the scalar sum(forward(x) * weighting)."""
    rng = np.random.default_rng(7)
    weighting = rng.normal(size=layer.forward(x.copy(), train=True).shape)

    def loss():
        return float((layer.forward(x, train=True) * weighting).sum())

    out = layer.forward(x, train=True)
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(weighting.astype(out.dtype))

    np.testing.assert_allclose(dx, fd_grad(loss, x), rtol=rtol, atol=atol)
    for p in layer.params():
        np.testing.assert_allclose(
            p.grad, fd_grad(loss, p.value), rtol=rtol, atol=atol, err_msg=p.name
        )


class TestLayerGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_linear(self):
        layer = nets.Linear(5, 3, rng=self.rng, dtype=np.float64)
        check_layer(layer, self.rng.normal(size=(4, 5)))

    def test_conv_stride1(self):
        layer = nets.Conv2d(2, 3, rng=self.rng, dtype=np.float64)
        check_layer(layer, self.rng.normal(size=(2, 2, 6, 6)))

    def test_conv_stride2(self):
        layer = nets.Conv2d(2, 3, stride=2, rng=self.rng, dtype=np.float64)
        check_layer(layer, self.rng.normal(size=(2, 2, 6, 6)))

    def test_conv_1x1_nopad(self):
        layer = nets.Conv2d(3, 2, ksize=1, pad=0, rng=self.rng, dtype=np.float64)
        check_layer(layer, self.rng.normal(size=(2, 3, 4, 4)))

    def test_relu(self):
        check_layer(nets.ReLU(), self.rng.normal(size=(3, 5)) + 0.05)

    def test_maxpool(self):
        check_layer(nets.MaxPool2d(), self.rng.normal(size=(2, 3, 6, 6)))

    def test_global_avg_pool(self):
        check_layer(nets.GlobalAvgPool(), self.rng.normal(size=(2, 3, 4, 4)))

    def test_batchnorm_train_mode(self):
        layer = nets.BatchNorm2d(3, dtype=np.float64)
        check_layer(layer, self.rng.normal(size=(4, 3, 3, 3)), rtol=1e-4, atol=1e-6)

    def test_residual_block_with_projection(self):
        layer = nets._basic_block(2, 4, stride=2, rng=self.rng, dtype=np.float64)
        check_layer(layer, self.rng.normal(size=(3, 2, 6, 6)), rtol=1e-4, atol=1e-6)

    def test_sequential_stack(self):
        net = nets.Sequential(
            [
                nets.Conv2d(1, 4, rng=self.rng, dtype=np.float64),
                nets.ReLU(),
                nets.MaxPool2d(),
                nets.GlobalAvgPool(),
                nets.Linear(4, 3, rng=self.rng, dtype=np.float64),
            ]
        )
        check_layer(net, self.rng.normal(size=(2, 1, 8, 8)))


class TestLosses:
    def test_cross_entropy_soft_gradient(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, 4))
        targets = rng.dirichlet(np.ones(4), size=5)
        _, dlogits = nets.cross_entropy_soft(logits, targets)

        def loss():
            return nets.cross_entropy_soft(logits, targets)[0]

        np.testing.assert_allclose(dlogits, fd_grad(loss, logits), rtol=1e-6, atol=1e-9)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        p = nets.softmax(rng.normal(size=(100, 7)) * 10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_uniform_target_cross_entropy_is_log_m(self):
        m = 5
        logits = np.zeros((3, m))
        targets = np.full((3, m), 1.0 / m)
        loss, _ = nets.cross_entropy_soft(logits, targets)
        assert loss == pytest.approx(np.log(m), rel=1e-12)


class TestOptimizer:
    def test_adam_converges_on_quadratic(self):
        p = nets.Param(np.zeros(4))
        opt = nets.Adam([p])
        for _ in range(800):
            p.zero_grad()
            p.grad += 2 * (p.value - 3.0)
            opt.step(0.05)
        np.testing.assert_allclose(p.value, 3.0, atol=1e-3)

    def test_cosine_schedule_endpoints(self):
        assert nets.cosine_lr(1.0, 0, 100) == pytest.approx(1.0)
        assert nets.cosine_lr(1.0, 99, 100) == pytest.approx(0.0, abs=1e-12)
        assert nets.cosine_lr(0.3, 0, 1) == pytest.approx(0.3)

    def test_weight_decay_pulls_toward_zero(self):
        p = nets.Param(np.full(3, 5.0))
        opt = nets.Adam([p], weight_decay=0.1)
        for _ in range(200):
            p.zero_grad()
            opt.step(0.1)
        assert np.all(np.abs(p.value) < 5.0)


class TestStateHandling:
    def test_ema_update_momentum_zero_copies_online(self):
        rng = np.random.default_rng(3)
        online = nets.build_mlp([4, 4, 2], rng, dtype=np.float64)
        target = online.clone()
        for p in online.params():
            p.value += 1.0
        nets.ema_update(target, online, 0.0)
        for t, o in zip(target.params(), online.params()):
            np.testing.assert_array_equal(t.value, o.value)

    def test_checksum_changes_with_parameters(self):
        rng = np.random.default_rng(4)
        net = nets.build_mlp([3, 3], rng)
        before = nets.parameter_checksum(net)
        net.params()[0].value += 1.0
        assert nets.parameter_checksum(net) != before

    def test_resnet_builder_forward_shape(self):
        rng = np.random.default_rng(5)
        net = nets.build_resnet18(4, rng)
        out = net.forward(np.zeros((2, 1, 32, 32), dtype=np.float32), train=True)
        assert out.shape == (2, 32)
