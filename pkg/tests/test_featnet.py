import numpy as np
import pytest

from echostyle import featnet
from echostyle.featnet import LayerSpec, build_network


def small_spec():
    return [
        LayerSpec("conv", "c1", out_channels=3, kernel=3, padding=1),
        LayerSpec("activation", "a1"),
        LayerSpec("pool", "p1", window=2, mode="avg"),
        LayerSpec("residual", "r2", body=(
            LayerSpec("conv", "r2c", out_channels=3, kernel=3, padding=1),
            LayerSpec("activation", "r2a"),
        )),
        LayerSpec("conv", "c3", out_channels=2, kernel=3, padding=1),
    ]


class TestBuild:
    def test_same_seed_identical_checksum(self):
        a = build_network(small_spec(), seed=42)
        b = build_network(small_spec(), seed=42)
        assert a.checksum() == b.checksum()

    def test_different_seeds_differ(self):
        a = build_network(small_spec(), seed=1)
        b = build_network(small_spec(), seed=2)
        assert a.checksum() != b.checksum()

    def test_empty_spec_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_network([], seed=0)

    def test_incompatible_residual_names_layer(self):
        bad = [
            LayerSpec("conv", "c1", out_channels=3, padding=1),
            LayerSpec("residual", "r", body=(
                LayerSpec("conv", "rc", out_channels=5, padding=1),
            )),
        ]
        with pytest.raises(ValueError, match="layer 1"):
            build_network(bad, seed=0)

    def test_dense_needs_input_size(self):
        spec = [LayerSpec("dense", "d", units=2)]
        with pytest.raises(ValueError, match="input size"):
            build_network(spec, seed=0)
        net = build_network(spec, seed=0, input_size=(4, 4))
        assert net.params["d"]["weight"].shape == (2, 16)

    def test_duplicate_names_rejected(self):
        spec = [
            LayerSpec("conv", "x", out_channels=1, padding=1),
            LayerSpec("activation", "x"),
        ]
        with pytest.raises(ValueError, match="duplicate"):
            build_network(spec, seed=0)


class TestForward:
    def test_identity_conv_network(self):
        net = build_network([LayerSpec("conv", "c", out_channels=1, kernel=1, padding=0)],
                            seed=0)
        net.params["c"]["weight"][...] = 1.0
        net.params["c"]["bias"][...] = 0.0
        img = np.random.default_rng(0).uniform(0, 1, (8, 8))
        out = featnet.extract_features(net, img, ["c"])["c"]
        np.testing.assert_array_equal(out[0], img)

    def test_zero_image_bias_free_gives_zero_features(self):
        net = featnet.default_feature_network()
        stack = net.forward(np.zeros((16, 16)))
        for name, act in stack.items():
            np.testing.assert_array_equal(act, np.zeros_like(act))

    def test_recomputation_is_bitwise_identical(self):
        net = featnet.default_feature_network()
        img = np.random.default_rng(3).uniform(0, 1, (16, 16))
        a = net.forward(img)
        b = net.forward(img)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_unknown_layer_id(self):
        net = featnet.default_feature_network()
        with pytest.raises(ValueError, match="nope"):
            featnet.extract_features(net, np.full((16, 16), 0.5), ["nope"])

    def test_residual_layer_is_exact_sum(self):
        net = featnet.default_feature_network()
        img = np.random.default_rng(4).uniform(0.1, 0.9, (16, 16))
        stack = net.forward(img)
        from echostyle.tensor import conv2d, relu
        body = relu(conv2d(stack["pool2"], net.params["res3_conv"]["weight"],
                           net.params["res3_conv"]["bias"], 1, 1))
        np.testing.assert_array_equal(stack["res3"], stack["pool2"] + body)

    def test_wrong_channel_count(self):
        net = featnet.default_feature_network()
        with pytest.raises(ValueError, match="channel"):
            net.forward(np.zeros((3, 16, 16)))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        net = featnet.default_feature_network()
        img = np.random.default_rng(5).uniform(0, 1, (16, 16))
        stack = net.forward(img)
        gx, grads = featnet.backward(net, img, {"relu4": np.zeros_like(stack["relu4"])})
        np.testing.assert_array_equal(gx, np.zeros_like(img))
        for g in grads.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_identity_network_passes_gradient_through(self):
        net = build_network([LayerSpec("conv", "c", out_channels=1, kernel=1, padding=0)],
                            seed=0)
        net.params["c"]["weight"][...] = 1.0
        img = np.random.default_rng(6).uniform(0, 1, (8, 8))
        g = np.random.default_rng(7).normal(size=(1, 8, 8))
        gx, _ = featnet.backward(net, img, {"c": g})
        np.testing.assert_array_equal(gx, g[0])

    def test_seed_shape_mismatch(self):
        net = featnet.default_feature_network()
        with pytest.raises(ValueError, match="shape"):
            featnet.backward(net, np.full((16, 16), 0.5), {"relu4": np.zeros((1, 2, 2))})

    def _fd_check(self, net, img, loss_fn, analytic, coords, h=1e-5, tol=1e-4):
        bad = 0
        for idx in coords:
            e = np.zeros_like(img)
            e[idx] = h
            fd = (loss_fn(img + e) - loss_fn(img - e)) / (2 * h)
            err = abs(fd - analytic[idx]) / max(abs(fd), abs(analytic[idx]), 1e-8)
            bad += err > tol
        return bad

    def test_pixel_gradients_match_finite_differences(self):
        net = featnet.default_feature_network()
        rng = np.random.default_rng(8)
        img = rng.uniform(0.1, 0.9, (16, 16))
        target = rng.normal(size=net.forward(img)["relu4"].shape)

        def loss(im):
            return float(np.sum(net.forward(im)["relu4"] * target))

        gx, _ = featnet.backward(net, img, {"relu4": target})
        coords = [tuple(c) for c in rng.integers(0, 16, size=(60, 2))]
        bad = self._fd_check(net, img, loss, gx, coords)
        assert bad <= max(1, len(coords) // 100)

    def test_parameter_gradients_match_finite_differences(self):
        net = build_network(small_spec(), seed=9)
        rng = np.random.default_rng(10)
        img = rng.uniform(0.1, 0.9, (8, 8))
        target = rng.normal(size=net.forward(img)["c3"].shape)

        _, grads = featnet.backward(net, img, {"c3": target})
        flat_g = net.flatten_grads(grads)
        base = net.flat_params()
        h = 1e-5
        bad = 0
        checked = 0
        for k in rng.choice(base.size, size=80, replace=False):
            p = base.copy(); p[k] += h
            net.set_flat_params(p)
            hi = float(np.sum(net.forward(img)["c3"] * target))
            p[k] -= 2 * h
            net.set_flat_params(p)
            lo = float(np.sum(net.forward(img)["c3"] * target))
            net.set_flat_params(base)
            fd = (hi - lo) / (2 * h)
            err = abs(fd - flat_g[k]) / max(abs(fd), abs(flat_g[k]), 1e-8)
            bad += err > 1e-4
            checked += 1
        assert bad <= max(1, checked // 100)

    def test_multi_layer_seeds_accumulate(self):
        net = featnet.default_feature_network()
        img = np.random.default_rng(11).uniform(0.1, 0.9, (16, 16))
        stack = net.forward(img)
        s1 = {"relu2": np.ones_like(stack["relu2"])}
        s2 = {"relu4": np.ones_like(stack["relu4"])}
        g1, _ = featnet.backward(net, img, s1)
        g2, _ = featnet.backward(net, img, s2)
        g12, _ = featnet.backward(net, img, {**s1, **s2})
        np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-15)


class TestWeightFile:
    def test_round_trip(self, tmp_path):
        net = featnet.default_feature_network(seed=5)
        p = tmp_path / "w.bin"
        featnet.save_weights(net, p)
        other = featnet.default_feature_network(seed=6)
        assert other.checksum() != net.checksum()
        featnet.load_weights(other, p)
        assert other.checksum() == net.checksum()

    def test_corruption_detected(self, tmp_path):
        net = featnet.default_feature_network()
        p = tmp_path / "w.bin"
        featnet.save_weights(net, p)
        blob = bytearray(p.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="checksum"):
            featnet.load_weights(net, p)

    def test_shape_mismatch_detected(self, tmp_path):
        net = featnet.default_feature_network()
        p = tmp_path / "w.bin"
        featnet.save_weights(net, p)
        other = build_network(small_spec(), seed=0)
        with pytest.raises(ValueError):
            featnet.load_weights(other, p)
