import numpy as np
import pytest

from recovnet.layers import BatchNorm, Conv2D, ReLU, Sigmoid, UpsampleNearest2
from recovnet.losses import (
    categorical_cross_entropy,
    categorical_cross_entropy_grad,
    hybrid_segmentation_loss,
    hybrid_segmentation_loss_grad,
)
from recovnet.networks import (
    CLASS_ORDER,
    DecoderSpec,
    EncoderSpec,
    binarize_mask,
    build_classifier,
    build_decoder,
    build_encoder,
    build_segmentation_network,
    classify,
    detach_encoder,
    predict_label,
    register_encoder,
    seg_forward,
)

RNG = np.random.default_rng(0)


class TestEncoder:
    def test_224_gives_7x7(self):
        enc = build_encoder(EncoderSpec(), seed=0)
        out = enc.forward(RNG.random((1, 224, 224, 3)).astype(np.float32))
        assert out.shape == (1, 7, 7, 256)

    def test_64_gives_2x2(self):
        enc = build_encoder(EncoderSpec(), seed=0)
        out = enc.forward(RNG.random((2, 64, 64, 3)).astype(np.float32))
        assert out.shape == (2, 2, 2, 256)

    def test_same_seed_bitwise_identical(self):
        a = build_encoder(EncoderSpec(), seed=11)
        b = build_encoder(EncoderSpec(), seed=11)
        for (na, la, ka), (_, lb, kb) in zip(a.trainable(), b.trainable()):
            assert np.array_equal(la.params[ka], lb.params[kb]), na

    def test_different_seed_differs(self):
        a = build_encoder(EncoderSpec(), seed=0)
        b = build_encoder(EncoderSpec(), seed=1)
        assert not np.array_equal(a.layers[0].params["w"], b.layers[0].params["w"])

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="power of 2"):
            EncoderSpec(downsample_factor=20)
        with pytest.raises(ValueError, match="init"):
            EncoderSpec(init="imagenet")
        with pytest.raises(ValueError, match="channel widths"):
            EncoderSpec(channels=(8, 16)).resolved_channels()
        with pytest.raises(ValueError, match="output_channels"):
            EncoderSpec(channels=(8, 16, 32, 64, 128)).resolved_channels()

    def test_pretrained_init_is_loaded_not_built(self):
        with pytest.raises(ValueError, match="checkpoint"):
            build_encoder(EncoderSpec(init="pretrained-checkpoint"))

    def test_registry(self):
        def tiny(spec, seed, dtype):
            from recovnet.networks import Encoder

            return Encoder([Conv2D("only.conv", 3, spec.output_channels, rng=np.random.default_rng(seed), dtype=dtype)], spec)

        register_encoder("tiny-test", tiny)
        enc = build_encoder(EncoderSpec(name="tiny-test", downsample_factor=1, output_channels=4))
        assert enc.forward(RNG.random((1, 8, 8, 3)).astype(np.float32)).shape == (1, 8, 8, 4)

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="no encoder builder"):
            build_encoder(EncoderSpec(name="resnet999"))


class TestDecoder:
    def test_7x7_to_224(self):
        dec = build_decoder(DecoderSpec(), in_channels=64, seed=0)
        out = dec.forward(RNG.random((1, 7, 7, 64)).astype(np.float32))
        assert out.shape == (1, 224, 224, 1)
        assert 0.0 < out.min() and out.max() < 1.0

    def test_layer_metadata(self):
        dec = build_decoder(DecoderSpec(), in_channels=64, seed=0)
        filters = [256, 128, 64, 32, 16]
        i = 0
        for stage, f in enumerate(filters, start=1):
            kinds = [UpsampleNearest2, Conv2D, BatchNorm, ReLU, Conv2D, BatchNorm, ReLU]
            for kind in kinds:
                layer = dec.layers[i]
                assert isinstance(layer, kind), f"layer {i} in stage {stage}"
                if isinstance(layer, Conv2D):
                    assert layer.out_channels == f
                    assert layer.kernel == 3
                i += 1
        assert isinstance(dec.layers[i], Conv2D) and dec.layers[i].out_channels == 1
        assert isinstance(dec.layers[i + 1], Sigmoid)
        assert i + 2 == len(dec.layers)

    def test_parameter_count_closed_form(self):
        # Sum of conv kernels/biases and batch-norm scale/shift pairs for a
        # 64-channel input, worked out from the layer arithmetic alone.
        filters = [256, 128, 64, 32, 16]
        expected = 0
        c = 64
        for f in filters:
            expected += 3 * 3 * c * f + f  # conv1
            expected += 2 * f  # bn1 gamma/beta
            expected += 3 * 3 * f * f + f  # conv2
            expected += 2 * f  # bn2
            c = f
        expected += 3 * 3 * 16 * 1 + 1  # output conv
        dec = build_decoder(DecoderSpec(), in_channels=64, seed=0)
        got = sum(layer.params[k].size for _, layer, k in dec.trainable())
        assert got == expected

    def test_spec_is_fixed(self):
        with pytest.raises(ValueError):
            DecoderSpec(stage_filters=(256, 128, 64, 32))
        with pytest.raises(ValueError):
            DecoderSpec(final_filters=2)
        with pytest.raises(ValueError):
            DecoderSpec(kernel=(5, 5))


class TestSegNetwork:
    def test_forward_shape_and_range(self):
        net = build_segmentation_network(seed=0)
        x = RNG.random((2, 224, 224, 3)).astype(np.float32)
        pred = seg_forward(net, x)
        assert pred.shape == (2, 224, 224, 1)
        assert 0.0 < pred.min() and pred.max() < 1.0

    def test_inference_deterministic(self):
        net = build_segmentation_network(seed=0)
        x = RNG.random((1, 64, 64, 3)).astype(np.float32)
        np.testing.assert_array_equal(seg_forward(net, x), seg_forward(net, x))

    def test_untrained_mean_in_sane_band(self):
        net = build_segmentation_network(seed=3)
        x = np.random.default_rng(33).random((2, 64, 64, 3)).astype(np.float32)
        mean = float(seg_forward(net, x).mean())
        assert 0.01 < mean < 0.99

    def test_indivisible_input_rejected(self):
        net = build_segmentation_network(seed=0)
        with pytest.raises(ValueError, match="divisible"):
            net.forward(RNG.random((1, 60, 60, 3)).astype(np.float32))

    def test_mismatched_depth_rejected(self):
        enc = build_encoder(EncoderSpec(downsample_factor=16, output_channels=128))
        dec = build_decoder(DecoderSpec(), in_channels=128)
        from recovnet.networks import SegNetwork

        with pytest.raises(ValueError, match="downsamples"):
            SegNetwork(enc, dec)

    def test_no_skip_property(self):
        # The decoder output must be a function of the final feature map
        # alone: feeding the captured feature map through the decoder
        # reproduces the full forward pass exactly.
        net = build_segmentation_network(seed=1)
        x = RNG.random((2, 64, 64, 3)).astype(np.float32)
        full = net.forward(x, training=False)
        feats = net.encode(x, training=False)
        direct = net.decode(feats, training=False)
        np.testing.assert_array_equal(full, direct)


class TestBinarize:
    def test_above_threshold(self):
        assert binarize_mask(np.full((2, 2), 0.7), 0.5).min() == 1.0

    def test_boundary_is_positive(self):
        assert binarize_mask(np.full((2, 2), 0.5), 0.5).min() == 1.0

    def test_matches_elementwise_comparison(self):
        pred = RNG.random((5, 5))
        np.testing.assert_array_equal(binarize_mask(pred, 0.3), (pred >= 0.3).astype(float))

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            binarize_mask(np.zeros((2, 2)), 0.0)


class TestDetachAndClassifier:
    def test_detach_is_value_identical(self):
        net = build_segmentation_network(seed=5)
        enc = detach_encoder(net)
        for (name, la, ka), (_, lb, kb) in zip(net.encoder.trainable(), enc.trainable()):
            assert np.array_equal(la.params[ka], lb.params[kb]), name

    def test_detach_isolated_from_source(self):
        net = build_segmentation_network(seed=5)
        enc = detach_encoder(net)
        enc.layers[0].params["w"] += 1.0
        assert not np.array_equal(
            enc.layers[0].params["w"], net.encoder.layers[0].params["w"]
        )

    def test_detached_forward_matches_internal_activations(self):
        net = build_segmentation_network(seed=6)
        enc = detach_encoder(net)
        x = RNG.random((1, 64, 64, 3)).astype(np.float32)
        np.testing.assert_array_equal(
            enc.forward(x, training=False), net.encode(x, training=False)
        )

    def test_transfer_identity_bitwise(self):
        net = build_segmentation_network(seed=7)
        clf = build_classifier(detach_encoder(net), head_seed=3)
        src = net.encoder.state_dict()
        dst = clf.encoder.state_dict()
        assert src.keys() == dst.keys()
        for key in src:
            assert np.array_equal(src[key], dst[key]), key

    def test_classifier_rows_sum_to_one(self):
        net = build_segmentation_network(seed=8)
        clf = build_classifier(detach_encoder(net), head_seed=0)
        probs = classify(clf, RNG.random((3, 64, 64, 3)).astype(np.float32))
        assert probs.shape == (3, 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_head_gives_half_half(self):
        net = build_segmentation_network(seed=9)
        clf = build_classifier(detach_encoder(net), head_seed=0)
        clf.dense.params["w"][:] = 0.0
        clf.dense.params["b"][:] = 0.0
        probs = classify(clf, RNG.random((2, 64, 64, 3)).astype(np.float32))
        np.testing.assert_allclose(probs, 0.5, atol=1e-7)

    def test_gap_of_constant_channels(self):
        from recovnet.layers import GlobalAvgPool

        c = np.array([1.5, -2.0, 0.25])
        feats = np.broadcast_to(c, (1, 4, 4, 3)).astype(np.float64)
        np.testing.assert_allclose(GlobalAvgPool("g").forward(feats), c[None])

    def test_output_shape_independent_of_image_size(self):
        net = build_segmentation_network(seed=10)
        clf = build_classifier(detach_encoder(net), head_seed=0)
        for size in (32, 64, 96):
            probs = classify(clf, RNG.random((1, size, size, 3)).astype(np.float32))
            assert probs.shape == (1, 2)


class TestPredictLabel:
    def test_argmax(self):
        labels = predict_label(np.array([[0.9, 0.1], [0.2, 0.8]]))
        assert labels == ["control", "covid"]

    def test_tie_goes_to_control(self):
        assert predict_label(np.array([[0.5, 0.5]])) == ["control"]

    def test_matches_index_oracle(self):
        rng = np.random.default_rng(1)
        probs = rng.random((20, 1))
        probs = np.hstack([1 - probs, probs])
        want = [CLASS_ORDER[int(np.argmax(row))] for row in probs]
        assert predict_label(probs) == want

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            predict_label(np.zeros((2, 3)))


def _check_coords(analytic, w, loss_of_w, n_random=3, n_top=3, step=1e-5, tol=1e-3):
    """Compare analytic entries against central differences.

    The step sits in the estimator's convergent regime: at coarser steps
    the finite difference itself is dominated by curvature of the deep
    composition, not by gradient error.
    """
    rng = np.random.default_rng(22)
    coords = [tuple(rng.integers(0, s) for s in w.shape) for _ in range(n_random)]
    flat_top = np.argsort(np.abs(analytic).ravel())[::-1][:n_top]
    coords += [np.unravel_index(i, w.shape) for i in flat_top]
    for coord in coords:
        orig = w[coord]
        w[coord] = orig + step
        hi = loss_of_w()
        w[coord] = orig - step
        lo = loss_of_w()
        w[coord] = orig
        numeric = (hi - lo) / (2 * step)
        denom = max(abs(analytic[coord]), abs(numeric), 1e-8)
        assert abs(analytic[coord] - numeric) / denom < tol, coord


class TestEndToEndGradients:
    """Whole-network gradients against finite differences (float64)."""

    def test_hybrid_loss_wrt_decoder_weight(self):
        net = build_segmentation_network(seed=2, dtype=np.float64)
        x = np.random.default_rng(20).random((2, 32, 32, 3))
        target = (np.random.default_rng(21).random((2, 32, 32, 1)) > 0.5).astype(np.float64)

        pred = net.forward(x, training=True)
        net.backward(hybrid_segmentation_loss_grad(pred, target))
        layer = net.decoder.layers[net.decoder.index_of("stage3.conv1")]

        _check_coords(
            layer.grads["w"],
            layer.params["w"],
            lambda: hybrid_segmentation_loss(net.forward(x, training=True), target),
        )

    def test_cross_entropy_wrt_encoder_weight(self):
        net = build_segmentation_network(seed=4, dtype=np.float64)
        clf = build_classifier(detach_encoder(net), head_seed=5)
        x = np.random.default_rng(23).random((2, 32, 32, 3))
        onehot = np.eye(2)[[0, 1]].astype(np.float64)

        probs = clf.forward(x, training=True)
        clf.backward(categorical_cross_entropy_grad(probs, onehot))
        layer = clf.encoder.layers[clf.encoder.index_of("block2.conv")]

        _check_coords(
            layer.grads["w"],
            layer.params["w"],
            lambda: categorical_cross_entropy(clf.forward(x, training=True), onehot),
        )
