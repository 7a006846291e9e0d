import numpy as np
import pytest

from echostyle import lrp
from echostyle.featnet import LayerSpec, build_network, default_feature_network
from echostyle.lrp import (
    LrpConfig,
    conservation_audit,
    lrp_conv,
    lrp_dense,
    lrp_pool,
    propagate,
    propagate_from,
    read_sidecar,
    relevance_to_rgb,
    render_heatmap,
)


def synthetic_image(rng, size=16):
    base = rng.uniform(0.15, 0.85, size=(size, size))
    return np.clip(base * (1 + 0.3 * rng.standard_normal((size, size))), 0.02, 0.98)


class TestConfig:
    def test_alpha_minus_beta_must_be_one(self):
        LrpConfig(2.0, 1.0)
        LrpConfig(1.0, 0.0)
        with pytest.raises(ValueError, match="conservation"):
            LrpConfig(2.0, 0.5)

    def test_nonnegative_fields(self):
        with pytest.raises(ValueError):
            LrpConfig(0.5, -0.5)


class TestDenseRule:
    def test_hand_evaluated_messages(self):
        # two inputs of 1, one output with weights (2, 3): z = 5 = f(x);
        # with alpha=1, beta=0 the relevances are the contributions themselves
        out = lrp_dense(np.array([1.0, 1.0]), np.array([[2.0, 3.0]]),
                        np.array([5.0]), LrpConfig(1.0, 0.0, epsilon=0.0))
        np.testing.assert_allclose(out, [2.0, 3.0], rtol=1e-12)

    def test_all_negative_weights_absorb_with_stabilizer(self):
        out = lrp_dense(np.array([1.0, 1.0]), np.array([[-2.0, -3.0]]),
                        np.array([5.0]), LrpConfig(1.0, 0.0, epsilon=1e-9))
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_zero_denominator_without_stabilizer_raises(self):
        with pytest.raises(ZeroDivisionError, match="epsilon"):
            lrp_dense(np.array([1.0, 1.0]), np.array([[-2.0, -3.0]]),
                      np.array([5.0]), LrpConfig(1.0, 0.0, epsilon=0.0))

    def test_conservation_alpha_beta(self):
        # wide rows so every output has both positive and negative
        # contributions (nondegenerate denominators)
        rng = np.random.default_rng(0)
        x = rng.uniform(0.1, 1.0, size=12)
        w = rng.normal(size=(4, 12))
        assert all((row * x).min() < 0 < (row * x).max() for row in w)
        r = rng.uniform(0.5, 1.0, size=4)
        out = lrp_dense(x, w, r, LrpConfig(2.0, 1.0, epsilon=0.0))
        np.testing.assert_allclose(out.sum(), r.sum(), rtol=1e-10)

    def test_shape_check(self):
        with pytest.raises(ValueError, match="dense weight"):
            lrp_dense(np.ones(3), np.ones((2, 4)), np.ones(2), LrpConfig())


class TestConvRule:
    def test_relevance_sum_preserved(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.1, 1.0, size=(2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        r = rng.uniform(0.1, 1.0, size=(3, 6, 6))
        out = lrp_conv(x, w, r, LrpConfig(2.0, 1.0, epsilon=0.0), stride=1, padding=1)
        np.testing.assert_allclose(out.sum(), r.sum(), rtol=1e-8)

    def test_upstream_shape_check(self):
        with pytest.raises(ValueError, match="relevance shape"):
            lrp_conv(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), np.ones((1, 4, 4)),
                     LrpConfig(), stride=1, padding=0)


class TestPoolRule:
    def test_avg_constant_region_uniform(self):
        x = np.full((1, 4, 4), 0.5)
        r = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = lrp_pool(x, 2, "avg", r, LrpConfig(epsilon=0.0))
        expected = np.repeat(np.repeat(r, 2, axis=1), 2, axis=2) / 4.0
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_max_unique_winner_takes_all(self):
        x = np.zeros((1, 2, 2))
        x[0, 1, 0] = 2.0
        out = lrp_pool(x, 2, "max", np.array([[[5.0]]]))
        expected = np.zeros((1, 2, 2))
        expected[0, 1, 0] = 5.0
        np.testing.assert_array_equal(out, expected)

    def test_max_tie_splits_equally(self):
        x = np.full((1, 2, 2), 1.5)
        out = lrp_pool(x, 2, "max", np.array([[[8.0]]]))
        np.testing.assert_array_equal(out, np.full((1, 2, 2), 2.0))

    def test_random_case_conserves_sum(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.1, 1.0, size=(3, 6, 6))
        r = rng.uniform(0.0, 1.0, size=(3, 3, 3))
        for mode in ("avg", "max"):
            out = lrp_pool(x, 2, mode, r, LrpConfig(epsilon=0.0))
            np.testing.assert_allclose(out.sum(), r.sum(), rtol=1e-12)


class TestPropagate:
    def test_identity_network_scalar_output(self):
        # a purely positive layer has no negative contributions, so the rule
        # runs with alpha=1, beta=0 (the beta part would be degenerate)
        net = build_network(
            [LayerSpec("conv", "c", out_channels=1, kernel=1, padding=0)], seed=0)
        net.params["c"]["weight"][...] = 1.0
        img = np.random.default_rng(3).uniform(0.1, 0.9, (8, 8))
        rmap = propagate(net, img, "sum", LrpConfig(1.0, 0.0, epsilon=0.0))
        np.testing.assert_allclose(rmap.pixel_relevance[0], img, rtol=1e-12)
        np.testing.assert_allclose(rmap.pixel_relevance.sum(), rmap.output_value,
                                   rtol=1e-12)

    def test_zero_image_all_zero_relevance(self):
        net = default_feature_network()
        rmap = propagate(net, np.zeros((16, 16)), "sum", LrpConfig(epsilon=1e-9))
        assert rmap.output_value == 0.0
        for r in rmap.layers.values():
            np.testing.assert_array_equal(r, np.zeros_like(r))

    def test_default_net_conservation_at_every_layer(self):
        net = default_feature_network()
        rng = np.random.default_rng(4)
        rmap = propagate(net, synthetic_image(rng), "sum", LrpConfig(2.0, 1.0, 0.0))
        for layer, total, gap in conservation_audit(rmap):
            assert gap < 1e-6, (layer, gap)

    def test_relevance_scales_linearly_with_seed(self):
        net = default_feature_network()
        rng = np.random.default_rng(5)
        img = synthetic_image(rng)
        stack = net.forward(img)
        seed = stack["res3"].copy()
        a = propagate_from(net, img, "res3", seed, LrpConfig(2.0, 1.0, 0.0))
        b = propagate_from(net, img, "res3", 3.0 * seed, LrpConfig(2.0, 1.0, 0.0))
        for layer in a.layers:
            np.testing.assert_allclose(b.layers[layer], 3.0 * a.layers[layer],
                                       rtol=1e-10, atol=1e-12)

    def test_nonnegative_with_alpha1_beta0_and_nonneg_weights(self):
        net = build_network([
            LayerSpec("conv", "c1", out_channels=2, kernel=3, padding=1),
            LayerSpec("activation", "a1"),
            LayerSpec("pool", "p1", window=2, mode="avg"),
            LayerSpec("conv", "c2", out_channels=1, kernel=3, padding=1),
        ], seed=7)
        for name in ("c1", "c2"):
            net.params[name]["weight"][...] = np.abs(net.params[name]["weight"])
        img = np.random.default_rng(8).uniform(0.1, 0.9, (8, 8))
        rmap = propagate(net, img, "sum", LrpConfig(1.0, 0.0, epsilon=0.0))
        for layer, r in rmap.layers.items():
            assert r.min() >= -1e-12, layer

    def test_unknown_layer(self):
        net = default_feature_network()
        with pytest.raises(ValueError, match="unknown layer"):
            propagate_from(net, np.full((16, 16), 0.5), "nope", np.zeros(3))

    def test_non_finite_relevance_aborts_with_layer_name(self):
        net = default_feature_network()
        img = np.full((16, 16), 0.5)
        stack = net.forward(img)
        seed = np.full_like(stack["relu2"], np.nan)
        with pytest.raises(ValueError, match="relu2"):
            propagate_from(net, img, "relu2", seed, LrpConfig())

    def test_classifier_target_seeds_single_logit(self):
        net = build_network([
            LayerSpec("conv", "c", out_channels=4, kernel=3, padding=1),
            LayerSpec("activation", "a"),
            LayerSpec("global-pool", "gp"),
            LayerSpec("dense", "d", units=3),
            LayerSpec("softmax", "sm"),
        ], seed=9, input_size=(8, 8))
        img = np.random.default_rng(10).uniform(0.1, 0.9, (8, 8))
        logits = net.forward(img)["d"]
        rmap = propagate(net, img, 1, LrpConfig(2.0, 1.0, epsilon=1e-9))
        assert rmap.output_value == logits[1]


class TestHeatmap:
    def test_zero_relevance_renders_neutral(self, tmp_path):
        rgb = relevance_to_rgb(np.zeros((4, 4)))
        np.testing.assert_array_equal(rgb, np.ones((4, 4, 3)))

    def test_single_positive_pixel_is_warm(self):
        rel = np.zeros((3, 3))
        rel[1, 1] = 2.0
        rgb = relevance_to_rgb(rel)
        assert rgb[1, 1, 0] == 1.0 and rgb[1, 1, 2] < 1.0  # red, not blue
        np.testing.assert_array_equal(rgb[0, 0], [1.0, 1.0, 1.0])

    def test_negative_is_cool(self):
        rgb = relevance_to_rgb(np.array([[-1.0, 0.0]]))
        assert rgb[0, 0, 2] == 1.0 and rgb[0, 0, 0] < 1.0  # blue, not red

    def test_round_trip_sidecar(self, tmp_path):
        net = default_feature_network()
        rng = np.random.default_rng(11)
        img = synthetic_image(rng)
        rmap = propagate(net, img, "sum", LrpConfig())
        out = tmp_path / "heat.png"
        sidecar = render_heatmap(rmap, "input", out)
        assert out.exists()
        back = read_sidecar(sidecar)
        np.testing.assert_allclose(back, rmap.pixel_relevance.sum(axis=0), rtol=1e-15)

    def test_ppm_output(self, tmp_path):
        net = default_feature_network()
        rmap = propagate(net, np.full((16, 16), 0.5), "sum", LrpConfig())
        out = tmp_path / "heat.ppm"
        render_heatmap(rmap, "input", out)
        assert out.exists() and out.read_bytes().startswith(b"P6")

    def test_unknown_layer_rejected(self, tmp_path):
        net = default_feature_network()
        rmap = propagate(net, np.full((16, 16), 0.5), "sum", LrpConfig())
        with pytest.raises(ValueError, match="no layer"):
            render_heatmap(rmap, "bogus", tmp_path / "x.png")
