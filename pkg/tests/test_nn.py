import numpy as np
import pytest

from lrsdag import nn
from lrsdag import tensor_core as tc


def project_fn(layer, r):
    """Scalarize a layer as sum(r * layer(x)) so grad_check can probe dx."""
    def fn(x):
        out = layer.forward(x)
        val = float((out * r).sum())
        for p in layer.params():
            p.grad.fill(0.0)
        dx = layer.backward(r)
        return val, dx
    return fn


def param_fn(layer, x, param, r):
    """Scalarize against one parameter tensor of the layer."""
    def fn(w):
        param.value[:] = w
        out = layer.forward(x)
        val = float((out * r).sum())
        for p in layer.params():
            p.grad.fill(0.0)
        layer.backward(r)
        return val, param.grad.copy()
    return fn


class TestBuilders:
    def test_fcn_shapes(self):
        net = nn.build_fcn(seed=0)
        split, logits = net.forward(np.random.default_rng(0).normal(size=(1, 1024)))
        assert logits.shape == (1, 10)
        assert split.shape == (1, 256)
        assert net.split_dim == 256

    def test_fcn_has_no_activations(self):
        net = nn.build_fcn(seed=0)
        assert all(isinstance(l, nn.Linear) for l in net.layers())

    def test_fcn_deterministic(self):
        a, b = nn.build_fcn(seed=7), nn.build_fcn(seed=7)
        assert a.param_bytes() == b.param_bytes()
        assert a.param_bytes() != nn.build_fcn(seed=8).param_bytes()

    def test_cnn_shapes(self):
        net = nn.build_cnn(seed=0)
        x = np.random.default_rng(1).normal(size=(2, 1, 32, 32))
        split, logits = net.forward(x)
        assert split.shape == (2, 32, 16, 16)
        assert logits.shape == (2, 10)
        assert net.split_shape == (32, 16, 16)

    def test_cnn_deterministic(self):
        assert nn.build_cnn(seed=3).param_bytes() == nn.build_cnn(seed=3).param_bytes()

    def test_fcn_flattens_image_batches(self):
        net = nn.build_fcn(seed=0)
        x = np.random.default_rng(2).normal(size=(4, 1, 32, 32))
        _, logits = net.forward(x)
        np.testing.assert_array_equal(logits, net.forward(x.reshape(4, 1024))[1])


class TestEncoder:
    def test_linear_identity_at_zero_noise(self):
        net = nn.build_fcn(seed=0)
        nn.build_encoder(net, seed=1, noise_scale=0.0)
        x = np.random.default_rng(3).normal(size=(5, 1024))
        with_e = net.forward(x, use_encoder=True)[1]
        without = net.forward(x, use_encoder=False)[1]
        np.testing.assert_allclose(with_e, without, atol=1e-9)

    def test_conv_identity_at_zero_noise(self):
        net = nn.build_cnn(seed=0)
        nn.build_encoder(net, seed=1, noise_scale=0.0)
        x = np.random.default_rng(4).normal(size=(2, 1, 32, 32))
        f = net.forward_features(x)
        split, _ = net.forward(x, use_encoder=True)
        # n1 output is post-ReLU (nonnegative), so the delta kernel + ReLU
        # encoder reproduces it exactly
        np.testing.assert_array_equal(split, f)

    def test_shape_preserved(self):
        net = nn.build_cnn(seed=0)
        nn.build_encoder(net, seed=2)
        x = np.random.default_rng(5).normal(size=(2, 1, 32, 32))
        split, _ = net.forward(x, use_encoder=True)
        assert split.shape[1:] == net.split_shape

    def test_same_seed_bit_identical(self):
        nets = [nn.build_fcn(seed=0) for _ in range(2)]
        for net in nets:
            nn.build_encoder(net, seed=11)
        assert nets[0].param_bytes(("encoder",)) == nets[1].param_bytes(("encoder",))

    def test_already_present(self):
        net = nn.build_fcn(seed=0)
        nn.build_encoder(net, seed=1)
        with pytest.raises(nn.EncoderAlreadyPresent):
            nn.build_encoder(net, seed=2)


class TestForward:
    def test_bypass_equals_encoderless(self):
        x = np.random.default_rng(6).normal(size=(3, 1024))
        plain = nn.build_fcn(seed=9)
        reference = plain.forward(x)[1].copy()
        nn.build_encoder(plain, seed=1)
        np.testing.assert_array_equal(plain.forward(x, use_encoder=False)[1], reference)

    def test_encoder_missing(self):
        net = nn.build_fcn(seed=0)
        with pytest.raises(nn.EncoderMissing):
            net.forward(np.zeros((1, 1024)), use_encoder=True)

    def test_split_features_definition(self):
        net = nn.build_fcn(seed=0)
        nn.build_encoder(net, seed=1)
        x = np.random.default_rng(7).normal(size=(2, 1024))
        f = net.forward_features(x)
        np.testing.assert_array_equal(net.forward(x, use_encoder=False)[0], f)
        assert not np.array_equal(net.forward(x, use_encoder=True)[0], f)


class TestAdam:
    def _layer_with_grad(self, g):
        layer = nn.Linear(3, 2, rng=np.random.default_rng(0))
        layer.weight.grad[:] = g
        return layer

    def test_zero_gradient_fixed_point(self):
        layer = self._layer_with_grad(0.0)
        before = layer.weight.value.copy()
        nn.Adam([layer], lr=0.1).step()
        np.testing.assert_array_equal(layer.weight.value, before)

    def test_first_step_magnitude(self):
        layer = self._layer_with_grad(0.0)
        g = np.random.default_rng(1).normal(size=(2, 3))
        layer.weight.grad[:] = g
        before = layer.weight.value.copy()
        opt = nn.Adam([layer], lr=0.01, epsilon=1e-8)
        opt.step()
        expected = before - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(layer.weight.value, expected, atol=1e-12)

    def test_frozen_untouched(self):
        layer = self._layer_with_grad(1.0)
        layer.frozen = True
        raw = layer.weight.value.tobytes()
        opt = nn.Adam([layer], lr=0.1, weight_decay=0.1)
        for _ in range(5):
            opt.step()
        assert layer.weight.value.tobytes() == raw

    def test_lr_zero_identity(self):
        layer = self._layer_with_grad(1.0)
        raw = layer.weight.value.tobytes()
        nn.Adam([layer], lr=0.0, weight_decay=0.5).step()
        assert layer.weight.value.tobytes() == raw

    def test_nonfinite_gradient(self):
        layer = self._layer_with_grad(np.nan)
        with pytest.raises(nn.NonFiniteGradient):
            nn.Adam([layer]).step()


class TestFreezing:
    def _train_steps(self, net, steps, x, labels):
        opt = nn.Adam(net.layers(use_encoder=net.encoder is not None), lr=1e-2)
        for _ in range(steps):
            opt.zero_grad()
            _, logits = net.forward(x, use_encoder=net.encoder is not None)
            net.backward(tc.cross_entropy_grad(logits, labels),
                         use_encoder=net.encoder is not None)
            opt.step()

    def test_frozen_blocks_bit_identical(self):
        net = nn.build_fcn(seed=0)
        nn.build_encoder(net, seed=1)
        nn.set_frozen(net, ("n1", "n2"), True)
        raw = net.param_bytes(("n1", "n2"))
        x = np.random.default_rng(8).normal(size=(16, 1024))
        labels = np.random.default_rng(9).integers(0, 10, size=16)
        self._train_steps(net, 10, x, labels)
        assert net.param_bytes(("n1", "n2")) == raw
        assert net.param_bytes(("encoder",)) != nn.build_fcn(seed=0).param_bytes(("n1",))

    def test_unfreeze_resumes(self):
        net = nn.build_fcn(seed=0)
        nn.set_frozen(net, ("n1",), True)
        raw = net.param_bytes(("n1",))
        x = np.random.default_rng(10).normal(size=(8, 1024))
        labels = np.random.default_rng(11).integers(0, 10, size=8)
        self._train_steps(net, 3, x, labels)
        assert net.param_bytes(("n1",)) == raw
        nn.set_frozen(net, ("n1",), False)
        self._train_steps(net, 3, x, labels)
        assert net.param_bytes(("n1",)) != raw

    def test_freeze_missing_encoder(self):
        with pytest.raises(nn.EncoderMissing):
            nn.set_frozen(nn.build_fcn(seed=0), ("encoder",), True)


class TestLayerGradients:
    """Finite-difference checks at the shapes the builders actually use."""

    CASES = [
        ("linear_1024_512", lambda rng: (nn.Linear(1024, 512, rng=rng), (2, 1024))),
        ("linear_256_128", lambda rng: (nn.Linear(256, 128, rng=rng), (2, 256))),
        ("conv_1_16_s1", lambda rng: (nn.Conv2d(1, 16, 3, 3, 1, 1, rng=rng), (2, 1, 12, 12))),
        ("conv_16_32_s2", lambda rng: (nn.Conv2d(16, 32, 3, 3, 2, 1, rng=rng), (2, 16, 8, 8))),
        ("conv_64_64_s1", lambda rng: (nn.Conv2d(64, 64, 3, 3, 1, 1, rng=rng), (1, 64, 4, 4))),
        ("relu", lambda rng: (nn.ReLU(), (2, 5, 4, 4))),
        ("flatten", lambda rng: (nn.Flatten(), (2, 3, 4, 4))),
    ]

    @pytest.mark.parametrize("name,factory", CASES, ids=[c[0] for c in CASES])
    def test_input_gradient(self, name, factory):
        rng = np.random.default_rng(hash(name) % 2**32)
        layer, in_shape = factory(rng)
        x = rng.normal(size=in_shape) + 0.1  # keep clear of the ReLU kink
        out = layer.forward(x)
        r = rng.normal(size=out.shape)
        err = tc.grad_check(project_fn(layer, r), x, eps=1e-5, max_coords=60, rng=rng)
        assert err < 1e-4

    @pytest.mark.parametrize("name,factory", CASES[:5], ids=[c[0] for c in CASES[:5]])
    def test_param_gradients(self, name, factory):
        rng = np.random.default_rng(hash(name + "p") % 2**32)
        layer, in_shape = factory(rng)
        x = rng.normal(size=in_shape)
        r = rng.normal(size=layer.forward(x).shape)
        for param in layer.params():
            err = tc.grad_check(param_fn(layer, x, param, r), param.value.copy(),
                                eps=1e-5, max_coords=60, rng=rng)
            assert err < 1e-4

    def test_full_network_input_gradient(self):
        rng = np.random.default_rng(42)
        net = nn.build_fcn(seed=5)
        labels = rng.integers(0, 10, size=2)

        def fn(x):
            _, logits = net.forward(x)
            net.zero_grad()
            dx = net.backward(tc.cross_entropy_grad(logits, labels))
            return tc.cross_entropy(logits, labels), dx

        err = tc.grad_check(fn, rng.normal(size=(2, 1024)), eps=1e-5, max_coords=60, rng=rng)
        assert err < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = nn.build_cnn(seed=4)
        nn.build_encoder(net, seed=5)
        nn.set_frozen(net, ("n1", "n2"), True)
        path = tmp_path / "model.npz"
        nn.save_checkpoint(net, path, meta={"phase": "adapted", "seed": 4})
        loaded, meta = nn.load_checkpoint(path)
        assert meta == {"phase": "adapted", "seed": 4}
        assert loaded.arch == "cnn"
        assert loaded.split_shape == net.split_shape
        for blocks in (("n1",), ("n2",), ("encoder",)):
            assert loaded.param_bytes(blocks) == net.param_bytes(blocks)
        assert all(l.frozen for l in loaded.n1)
        assert not any(l.frozen for l in loaded.encoder)

    def test_forward_identical_after_reload(self, tmp_path):
        net = nn.build_fcn(seed=6)
        path = tmp_path / "fcn.npz"
        nn.save_checkpoint(net, path)
        loaded, _ = nn.load_checkpoint(path)
        x = np.random.default_rng(12).normal(size=(3, 1024))
        np.testing.assert_array_equal(loaded.forward(x)[1], net.forward(x)[1])
