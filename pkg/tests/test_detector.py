"""Unit tests for local-gradient extraction and the AdvD detector."""

import numpy as np
import pytest

from advcheck.dataio import LabeledDataset, synth_dataset
from advcheck.detector import (DetectorError, DetectorModel,
                               LocalGradientRecord, build_training_set,
                               compress_features, default_layer, detect,
                               detect_batch, local_gradient,
                               local_gradient_batch, load_detector,
                               save_detector, train_detector)
from advcheck.netcore import (Conv2D, Dense, Flatten, MaxPool2D, Network,
                              ReLU, SGDOptions, train_classifier)


@pytest.fixture(scope="module")
def blob_net():
    ds = synth_dataset("gaussian_blobs", n=200, classes=4, image_side=8,
                       seed=1)
    layers = [Conv2D(out_channels=4, kernel=3), ReLU(), MaxPool2D(2),
              Flatten(), Dense(units=16), ReLU(), Dense(units=4)]
    net = Network.build(layers, (1, 8, 8), 4, seed=0)
    train_classifier(net, ds.images, ds.labels, SGDOptions(epochs=25, seed=0))
    return net, ds


def separable_records(n_per_class=40, dim=6, seed=0):
    """Two well-separated feature clusters; trivially learnable."""
    rng = np.random.default_rng(seed)
    recs = []
    for label, center in ((0, 1e-8), (1, 1e-1)):
        feats = np.abs(rng.normal(center, center / 4, size=(n_per_class, dim)))
        for f in feats:
            recs.append(LocalGradientRecord(features=f.astype(np.float32),
                                            label=label))
    return recs


class TestDefaultLayer:
    def test_conv_net_flatten_index(self, blob_net):
        net, _ = blob_net
        assert default_layer(net) == 3

    def test_leading_flatten(self):
        net = Network.build([Flatten(), Dense(units=2)], (1, 2, 2), 2, seed=0)
        assert default_layer(net) == 0

    def test_no_flatten_raises(self):
        net = Network.build([Dense(units=2)], (4,), 2, seed=0)
        with pytest.raises(DetectorError):
            default_layer(net)


class TestLocalGradient:
    def test_purity_and_shape(self, blob_net):
        net, ds = blob_net
        x = ds.images[0].copy()
        rec = local_gradient(net, x, default_layer(net))
        assert rec.features.shape == (4 * 3 * 3,)  # pooled conv map, flattened
        np.testing.assert_array_equal(x, ds.images[0])  # input untouched

    def test_batch_matches_single(self, blob_net):
        net, ds = blob_net
        li = default_layer(net)
        batch = local_gradient_batch(net, ds.images[:6], li)
        for i in range(6):
            single = local_gradient(net, ds.images[i], li).features
            # batched reductions reorder float sums; allow tiny drift
            np.testing.assert_allclose(batch[i], single, rtol=1e-4)

    def test_logit_gradient_at_last_layer_is_one_hot(self, blob_net):
        """Sanity anchor: the pre-softmax gradient seeds as a one-hot vector."""
        net, ds = blob_net
        x = ds.images[0]
        c = net.predict(x)
        g = net.grad_wrt_layer(x, len(net.layers) - 1, c, loss="logit")
        expected = np.zeros(4, dtype=np.float32)
        expected[c] = 1.0
        np.testing.assert_array_equal(g, expected)

    def test_compress_features_monotone_and_floored(self):
        f = np.array([0.0, 1e-6, 1e-3, 1e-1, 10.0], dtype=np.float32)
        g = compress_features(f)
        assert g[0] == 0.0
        assert np.all(np.diff(g) > 0)  # strictly monotone in |f|
        assert g[1] < 0.001  # below-kappa features compressed to ~0
        np.testing.assert_array_equal(compress_features(-f), g)  # even in f


class TestBuildTrainingSet:
    def test_counts_and_labels(self, blob_net):
        net, ds = blob_net
        recs = build_training_set(net, ds, default_layer(net), n_benign=10,
                                  n_misclassified=25, bound_l2=3.5, seed=0,
                                  max_attempts=300)
        assert len(recs) == 35
        labels = [r.label for r in recs]
        assert labels.count(0) == 10 and labels.count(1) == 25
        assert all(len(r.features) == 36 for r in recs)
        benign_idx = {r.origin_index for r in recs if r.label == 0}
        noisy_idx = {r.origin_index for r in recs if r.label == 1}
        assert not benign_idx & noisy_idx  # disjoint source examples

    def test_quota_unreachable_raises(self, blob_net):
        net, ds = blob_net
        with pytest.raises(DetectorError, match="quota"):
            build_training_set(net, ds, default_layer(net), n_benign=10,
                               n_misclassified=150, bound_l2=1e-6, seed=0,
                               max_attempts=2)

    def test_insufficient_correct_raises(self):
        # constant net classifies nothing with label 1 correctly
        net = Network.build([Flatten(), Dense(units=2)], (1, 2, 2), 2, seed=0)
        net.layers[1].weight[...] = 0.0
        net.layers[1].bias[...] = np.array([1.0, 0.0], dtype=np.float32)
        ds = LabeledDataset(np.full((5, 1, 2, 2), 0.5, dtype=np.float32),
                            np.ones(5, dtype=np.int64))
        with pytest.raises(DetectorError, match="correctly-classified"):
            build_training_set(net, ds, 0, n_benign=3, n_misclassified=1)

    def test_zero_misclassified_allowed(self, blob_net):
        net, ds = blob_net
        recs = build_training_set(net, ds, default_layer(net), n_benign=5,
                                  n_misclassified=0)
        assert len(recs) == 5 and all(r.label == 0 for r in recs)


class TestTrainDetector:
    def test_separable_pair_reaches_full_accuracy(self):
        model, acc = train_detector(separable_records(), structure=(32, 2),
                                    epochs=20, seed=0)
        assert acc == 1.0
        assert model.feature_length == 6

    def test_single_class_rejected(self):
        recs = [LocalGradientRecord(features=np.ones(3, dtype=np.float32),
                                    label=1) for _ in range(4)]
        with pytest.raises(DetectorError, match="both labels"):
            train_detector(recs)

    def test_empty_rejected(self):
        with pytest.raises(DetectorError, match="no training records"):
            train_detector([])

    def test_inconsistent_feature_length_rejected(self):
        recs = [LocalGradientRecord(np.ones(3, dtype=np.float32), label=0),
                LocalGradientRecord(np.ones(4, dtype=np.float32), label=1)]
        with pytest.raises(DetectorError, match="feature lengths"):
            train_detector(recs)

    def test_structure_must_end_in_two(self):
        with pytest.raises(DetectorError, match="2 output logits"):
            train_detector(separable_records(), structure=(32, 3))

    def test_retrain_same_seed_bit_identical(self):
        recs = separable_records()
        a, _ = train_detector(recs, structure=(16, 2), epochs=5, seed=7)
        b, _ = train_detector(recs, structure=(16, 2), epochs=5, seed=7)
        for la, lb in zip(a.network.layers, b.network.layers):
            for pa, pb in zip(la.params(), lb.params()):
                assert pa.tobytes() == pb.tobytes()


@pytest.fixture(scope="module")
def trained(blob_net):
    net, ds = blob_net
    recs = build_training_set(net, ds, default_layer(net), n_benign=10,
                              n_misclassified=25, bound_l2=3.5, seed=0,
                              max_attempts=300)
    model, _ = train_detector(recs, structure=(64, 2), epochs=10, seed=0,
                              base_fingerprint="fp0",
                              layer_index=default_layer(net))
    return net, ds, model


class TestDetect:
    def test_verdict_contract(self, trained):
        net, ds, model = trained
        verdict, score = detect(net, model, ds.images[0])
        assert verdict in ("benign", "misclassified")
        assert 0.0 <= score <= 1.0
        assert (verdict == "misclassified") == (score > 0.5)

    def test_determinism(self, trained):
        net, ds, model = trained
        assert detect(net, model, ds.images[3]) == detect(net, model,
                                                          ds.images[3])

    def test_batch_matches_single(self, trained):
        net, ds, model = trained
        verdicts, scores = detect_batch(net, model, ds.images[:8])
        for i in range(8):
            v, s = detect(net, model, ds.images[i])
            assert (verdicts[i] == 1) == (v == "misclassified")
            assert scores[i] == pytest.approx(s, abs=1e-7)

    def test_fingerprint_mismatch_raises(self, trained):
        net, ds, model = trained
        with pytest.raises(DetectorError, match="different base model"):
            detect(net, model, ds.images[0], expected_fingerprint="other")

    def test_matching_fingerprint_accepted(self, trained):
        net, ds, model = trained
        detect(net, model, ds.images[0], expected_fingerprint="fp0")

    def test_feature_length_mismatch_raises(self, trained):
        net, ds, model = trained
        bad = DetectorModel(network=model.network, layer_index=0,
                            base_fingerprint="fp0", feature_length=36)
        with pytest.raises(DetectorError, match="feature length"):
            detect(net, bad, ds.images[0])


class TestDetectorCheckpoint:
    def test_round_trip(self, tmp_path):
        model, _ = train_detector(separable_records(), structure=(16, 2),
                                  epochs=5, seed=0, base_fingerprint="abc123",
                                  layer_index=4)
        p = tmp_path / "advd.ckpt"
        save_detector(model, p)
        back = load_detector(p)
        assert back.layer_index == 4
        assert back.base_fingerprint == "abc123"
        assert back.feature_length == 6
        assert back.kappa == model.kappa and back.scale == model.scale
        feats = compress_features(
            np.stack([r.features for r in separable_records()]))
        np.testing.assert_array_equal(back.network.logits_batch(feats),
                                      model.network.logits_batch(feats))

    def test_non_detector_checkpoint_rejected(self, tmp_path, blob_net):
        from advcheck.netcore import save_network
        net, _ = blob_net
        p = tmp_path / "model.ckpt"
        save_network(net, p, {})
        with pytest.raises(DetectorError, match="not a detector"):
            load_detector(p)
