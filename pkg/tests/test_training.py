from dataclasses import replace

import numpy as np
import pytest

from synth import make_corpus
from recovnet.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from recovnet.errors import CheckpointError, ManifestError
from recovnet.manifest import DatasetManifest, SampleRecord, SplitSpec, load_manifest, stratified_split
from recovnet.networks import (
    DecoderSpec,
    EncoderSpec,
    build_classifier,
    build_segmentation_network,
    classify,
    detach_encoder,
    predict_label,
    seg_forward,
)
from recovnet.training import (
    PHASE_I_DEFAULTS,
    PHASE_II_DEFAULTS,
    TrainConfig,
    load_classification_arrays,
    load_segmentation_arrays,
    train_classifier,
    train_segmentation,
)


def small_net(seed=0):
    return build_segmentation_network(
        EncoderSpec(bn_momentum=0.9), DecoderSpec(bn_momentum=0.9), seed=seed
    )


def seg_train_manifest(tmp_path, n=16, size=32, seed=0):
    corpus = make_corpus(tmp_path / "corpus", n=n, size=size, seed=seed)
    manifest = load_manifest(corpus.seg_manifest)
    train, _ = stratified_split(manifest, SplitSpec(0.8, seed=0))
    return train


class TestTrainConfig:
    def test_defaults_match_published_protocol(self):
        assert (PHASE_I_DEFAULTS.epochs, PHASE_I_DEFAULTS.learning_rate, PHASE_I_DEFAULTS.batch_size) == (15, 1e-4, 32)
        assert (PHASE_II_DEFAULTS.epochs, PHASE_II_DEFAULTS.learning_rate, PHASE_II_DEFAULTS.batch_size) == (15, 1e-5, 64)
        assert PHASE_I_DEFAULTS.optimizer == "adam"
        assert (PHASE_I_DEFAULTS.beta1, PHASE_I_DEFAULTS.beta2) == (0.9, 0.999)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="sgd")


class TestSegmentationTraining:
    def test_default_config_improves_loss(self, tmp_path):
        corpus = make_corpus(tmp_path / "c", n=200, size=32, seed=1)
        manifest = load_manifest(corpus.seg_manifest)
        train, _ = stratified_split(manifest, SplitSpec(0.8, seed=0))
        net = small_net(seed=1)
        _, history = train_segmentation(net, train, PHASE_I_DEFAULTS, image_size=32)
        losses = history.losses()
        assert len(losses) == 15
        assert losses[-1] < losses[0]

    def test_deterministic_loss_curve(self, tmp_path):
        train = seg_train_manifest(tmp_path, n=16)
        cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8, seed=5)
        _, h1 = train_segmentation(small_net(seed=2), train, cfg, image_size=32)
        _, h2 = train_segmentation(small_net(seed=2), train, cfg, image_size=32)
        assert h1.losses() == h2.losses()

    def test_single_sample_short_batch(self, tmp_path):
        corpus = make_corpus(tmp_path / "c", n=4, size=32, seed=2)
        manifest = load_manifest(corpus.seg_manifest)
        one = DatasetManifest((replace(manifest.records[0], split="train"),), "segmentation")
        cfg = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=32, seed=0)
        _, history = train_segmentation(small_net(), one, cfg, image_size=32)
        assert len(history.epochs) == 1

    def test_empty_manifest_rejected(self):
        with pytest.raises(ManifestError, match="empty"):
            train_segmentation(small_net(), DatasetManifest((), "segmentation"))

    def test_image_mask_shape_mismatch(self, tmp_path):
        from conftest import write_gray_png

        img = write_gray_png(tmp_path / "i.png", size=32)
        mask = write_gray_png(tmp_path / "m.png", size=16, value=1.0)
        rec = SampleRecord(image_path=str(img), mask_path=str(mask), split="train")
        with pytest.raises(ManifestError, match="shapes differ"):
            load_segmentation_arrays(DatasetManifest((rec,)), 32)

    def test_run_dir_artifacts(self, tmp_path):
        train = seg_train_manifest(tmp_path, n=8)
        cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8, seed=0)
        run_dir = tmp_path / "run"
        _, history = train_segmentation(small_net(), train, cfg, image_size=32, run_dir=run_dir)
        assert (run_dir / "config.echo").is_file()
        assert (run_dir / "model.ckpt").is_file()
        lines = (run_dir / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,seconds"
        assert len(lines) == 3
        assert history.checkpoint_path == str(run_dir / "model.ckpt")
        echo = dict(l.split("=", 1) for l in (run_dir / "config.echo").read_text().splitlines())
        assert echo["seed"] == "0" and echo["phase"] == "segmentation"


class TestClassifierTraining:
    def _trained_parts(self, tmp_path, epochs=15):
        corpus = make_corpus(tmp_path / "c", n=40, size=32, seed=3, lesion=6)
        manifest = load_manifest(corpus.clf_manifest)
        net = small_net(seed=4)
        clf = build_classifier(detach_encoder(net), head_seed=1)
        train = DatasetManifest(
            tuple(replace(r, split="train") for r in manifest), "classification"
        )
        cfg = TrainConfig(epochs=epochs, learning_rate=1e-3, batch_size=16, seed=6)
        clf, history = train_classifier(clf, train, cfg, image_size=32)
        return clf, train, history

    def test_overfits_separable_set(self, tmp_path):
        clf, train, _ = self._trained_parts(tmp_path)
        x, _, labels = load_classification_arrays(train, 32)
        predicted = predict_label(classify(clf, x), clf.class_order)
        acc = float(np.mean([p == t for p, t in zip(predicted, labels)]))
        assert acc >= 0.95

    def test_encoder_is_not_frozen(self, tmp_path):
        corpus = make_corpus(tmp_path / "c", n=8, size=32, seed=5)
        manifest = load_manifest(corpus.clf_manifest)
        train = DatasetManifest(
            tuple(replace(r, split="train") for r in manifest), "classification"
        )
        clf = build_classifier(detach_encoder(small_net(seed=7)), head_seed=2)
        before = {k: v.copy() for k, v in clf.encoder.state_dict().items()}
        cfg = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=8, seed=0)
        clf, history = train_classifier(clf, train, cfg, image_size=32)
        after = clf.encoder.state_dict()
        changed = any(not np.array_equal(before[k], after[k]) for k in before)
        assert changed
        assert history.config["unfrozen"] == "true"

    def test_unknown_task_rejected(self, tmp_path):
        train = seg_train_manifest(tmp_path, n=8)
        clf = build_classifier(detach_encoder(small_net()), head_seed=0)
        with pytest.raises(ManifestError, match="classification"):
            train_classifier(clf, train, TrainConfig(epochs=1, learning_rate=1e-3, batch_size=8), image_size=32)


class TestCheckpoints:
    def test_seg_round_trip_probe_outputs(self, tmp_path):
        net = small_net(seed=8)
        path = save_checkpoint(net, tmp_path / "seg.ckpt")
        back = load_checkpoint(path)
        probe = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
        np.testing.assert_allclose(seg_forward(net, probe), seg_forward(back, probe), atol=1e-6)

    def test_classifier_round_trip(self, tmp_path):
        clf = build_classifier(detach_encoder(small_net(seed=9)), head_seed=4)
        path = save_checkpoint(clf, tmp_path / "clf.ckpt")
        back = load_checkpoint(path, expect_kind="classifier")
        probe = np.random.default_rng(1).random((2, 32, 32, 3)).astype(np.float32)
        np.testing.assert_allclose(classify(clf, probe), classify(back, probe), atol=1e-6)
        assert back.class_order == clf.class_order

    def test_kind_guard(self, tmp_path):
        clf = build_classifier(detach_encoder(small_net()), head_seed=0)
        path = save_checkpoint(clf, tmp_path / "clf.ckpt")
        with pytest.raises(CheckpointError, match="expected segmentation"):
            load_checkpoint(path, expect_kind="segmentation")

    def test_truncated_file_rejected(self, tmp_path):
        net = small_net()
        path = save_checkpoint(net, tmp_path / "seg.ckpt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"garbage bytes")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_version_guard(self, tmp_path):
        import json

        net = small_net()
        path = save_checkpoint(net, tmp_path / "seg.ckpt")
        with np.load(path, allow_pickle=False) as data:
            entries = {k: data[k] for k in data.files}
        meta = json.loads(str(entries["__meta__"]))
        meta["format_version"] = FORMAT_VERSION + 1
        entries["__meta__"] = np.array(json.dumps(meta))
        with open(path, "wb") as fh:
            np.savez(fh, **entries)
        with pytest.raises(CheckpointError, match="format version"):
            load_checkpoint(path)

    def test_detached_encoder_round_trip(self, tmp_path):
        net = small_net(seed=10)
        clf = build_classifier(detach_encoder(net), head_seed=3)
        path = save_checkpoint(clf, tmp_path / "clf.ckpt")
        back = load_checkpoint(path, expect_kind="classifier")
        src = clf.encoder.state_dict()
        dst = back.encoder.state_dict()
        for key in src:
            np.testing.assert_array_equal(src[key], dst[key])
