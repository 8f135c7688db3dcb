"""AdvCheck core: local-gradient extraction and the AdvD detector.

The detection feature for an input x is the local gradient at a chosen layer
(default: the flatten layer): the derivative of the predicted class's
confidence with respect to that layer's output.  Benign inputs on a
well-fitted model are predicted with near-saturated confidence, so their
local gradients are minuscule; misclassified inputs sit near decision
boundaries and their local gradients are orders of magnitude larger.  AdvD
is a small fully-connected network trained on magnitude-compressed local
gradients with labels benign=0 / misclassified=1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import noisy_misclassify
from .dataio import LabeledDataset
from .netcore import (Dense, Network, ReLU, SGDOptions, load_network,
                      save_network, train_classifier)
from .netcore.layers import F32, softmax

__all__ = ["LocalGradientRecord", "DetectorModel", "DetectorError",
           "default_layer", "local_gradient", "local_gradient_batch",
           "build_training_set", "train_detector", "detect", "detect_batch",
           "save_detector", "load_detector", "compress_features",
           "generate_training_inputs", "records_from_inputs"]

# Magnitude compression applied to features before the detector: a fixed
# monotone map g(f) = log1p(|f| / KAPPA) / SCALE.  Local-gradient magnitudes
# span many decades; KAPPA sets the soft floor below which features are
# treated as "essentially zero" and SCALE keeps inputs in a trainable range.
KAPPA = 1e-3
SCALE = 7.0


class DetectorError(RuntimeError):
    """Detector construction or compatibility failure."""


@dataclass
class LocalGradientRecord:
    """Flattened local-gradient feature vector plus a binary label."""

    features: np.ndarray
    label: int | None = None  # 0 = benign, 1 = misclassified
    source: str = "benign"
    origin_index: int | None = None  # dataset index the record came from


@dataclass
class DetectorModel:
    """AdvD: a dense network over compressed local-gradient features."""

    network: Network
    layer_index: int
    base_fingerprint: str
    feature_length: int
    kappa: float = KAPPA
    scale: float = SCALE


def compress_features(features: np.ndarray, kappa: float = KAPPA,
                      scale: float = SCALE) -> np.ndarray:
    """log1p(|f|/kappa)/scale — compresses the multi-decade magnitude range."""
    return (np.log1p(np.abs(features) / kappa) / scale).astype(F32)


def default_layer(net: Network) -> int:
    """The flatten layer's index — the layer between conv and dense stages."""
    try:
        return net.flatten_index()
    except ValueError as exc:
        raise DetectorError(str(exc)) from exc


def local_gradient(net: Network, x: np.ndarray,
                   layer_index: int) -> LocalGradientRecord:
    """Local gradient of x at ``layer_index`` for the predicted class.

    Features are the flattened derivative of the predicted class's
    post-softmax confidence with respect to the chosen layer's output.
    """
    g = net.grad_wrt_layer_batch(np.asarray(x, dtype=F32)[None], layer_index,
                                 "probability")
    return LocalGradientRecord(features=g.reshape(-1).astype(F32))


def local_gradient_batch(net: Network, xb: np.ndarray,
                         layer_index: int) -> np.ndarray:
    """(N, feature_length) local-gradient features for a batch of inputs."""
    g = net.grad_wrt_layer_batch(np.ascontiguousarray(xb, dtype=F32),
                                 layer_index, "probability")
    return g.reshape(len(xb), -1).astype(F32)


def generate_training_inputs(net: Network, benign: LabeledDataset,
                             n_benign: int = 10, n_misclassified: int = 200,
                             bound_l2: float = 0.25, seed: int = 0,
                             max_attempts: int = 1000, noise: str = "uniform"
                             ) -> tuple[np.ndarray, list[int],
                                        np.ndarray, list[int]]:
    """Pick benign inputs and generate noisy-misclassified inputs.

    Returns (benign_images, benign_indices, noisy_images, noisy_indices),
    where indices refer to positions in ``benign``.  Benign inputs are the
    first ``n_benign`` correctly-classified examples; noisy inputs come from
    subsequent correctly-classified examples, skipping any whose noise loop
    fails to flip the prediction.
    """
    rng = np.random.default_rng(seed)
    correct = [i for i in range(len(benign))
               if net.predict(benign.images[i]) == int(benign.labels[i])]
    if len(correct) < n_benign:
        raise DetectorError(
            f"only {len(correct)} correctly-classified examples; "
            f"need at least n_benign={n_benign}")
    benign_idx = correct[:n_benign]
    noisy_images, noisy_idx = [], []
    for i in correct[n_benign:]:
        if len(noisy_images) >= n_misclassified:
            break
        res = noisy_misclassify(net, benign.images[i], bound_l2,
                                max_attempts=max_attempts, rng=rng,
                                noise=noise)
        if res.success:
            noisy_images.append(res.x_adv)
            noisy_idx.append(i)
    if len(noisy_images) < n_misclassified:
        raise DetectorError(
            f"noisy generation quota unreachable: produced "
            f"{len(noisy_images)} of {n_misclassified} misclassified records")
    benign_images = benign.images[benign_idx]
    if noisy_images:
        noisy_arr = np.stack(noisy_images)
    else:
        noisy_arr = np.zeros((0,) + benign.images.shape[1:], dtype=F32)
    return benign_images, benign_idx, noisy_arr, noisy_idx


def records_from_inputs(net: Network, layer_index: int,
                        benign_images: np.ndarray, benign_idx: list[int],
                        noisy_images: np.ndarray, noisy_idx: list[int],
                        noisy_source: str = "noisy"
                        ) -> list[LocalGradientRecord]:
    """Build labeled records at ``layer_index`` from prepared inputs."""
    records = []
    if len(benign_images):
        feats = local_gradient_batch(net, benign_images, layer_index)
        for f, i in zip(feats, benign_idx):
            records.append(LocalGradientRecord(features=f, label=0,
                                               source="benign", origin_index=i))
    if len(noisy_images):
        feats = local_gradient_batch(net, noisy_images, layer_index)
        for f, i in zip(feats, noisy_idx):
            records.append(LocalGradientRecord(features=f, label=1,
                                               source=noisy_source,
                                               origin_index=i))
    return records


def build_training_set(net: Network, benign: LabeledDataset, layer_index: int,
                       n_benign: int = 10, n_misclassified: int = 200,
                       bound_l2: float = 0.25, seed: int = 0,
                       max_attempts: int = 1000,
                       noise: str = "uniform") -> list[LocalGradientRecord]:
    """10 benign + 200 noisy-misclassified records (defaults), in dataset order."""
    bx, bi, nx, ni = generate_training_inputs(
        net, benign, n_benign, n_misclassified, bound_l2, seed, max_attempts,
        noise)
    return records_from_inputs(net, layer_index, bx, bi, nx, ni)


def train_detector(records: list[LocalGradientRecord],
                   structure: tuple[int, ...] = (512, 2), epochs: int = 7,
                   batch_size: int = 32, seed: int = 0,
                   learning_rate: float = 0.05, momentum: float = 0.9,
                   class_weighting: bool = True,
                   base_fingerprint: str = "", layer_index: int = 0
                   ) -> tuple[DetectorModel, float]:
    """Train AdvD on compressed features; returns (model, training accuracy).

    The loss is cross entropy; with ``class_weighting`` on (the default),
    class weights are inversely proportional to class frequency.
    """
    if not records:
        raise DetectorError("no training records")
    labels = np.array([r.label for r in records], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise DetectorError("training records must contain both labels")
    lengths = {len(r.features) for r in records}
    if len(lengths) != 1:
        raise DetectorError(f"inconsistent feature lengths: {sorted(lengths)}")
    feature_length = lengths.pop()
    if structure[-1] != 2:
        raise DetectorError("detector structure must end with 2 output logits")
    feats = compress_features(np.stack([r.features for r in records]))
    layers = []
    for j, units in enumerate(structure):
        layers.append(Dense(units=units))
        if j < len(structure) - 1:
            layers.append(ReLU())
    network = Network.build(layers, (feature_length,), 2, seed=seed)
    weights = None
    if class_weighting:
        n = len(labels)
        counts = np.bincount(labels, minlength=2)
        weights = (n / (2.0 * np.maximum(counts, 1))).astype(F32)
    opt = SGDOptions(learning_rate=learning_rate, momentum=momentum,
                     epochs=epochs, batch_size=batch_size, seed=seed)
    train_classifier(network, feats, labels, opt, class_weights=weights)
    train_acc = float(np.mean(network.predict_batch(feats) == labels))
    model = DetectorModel(network=network, layer_index=layer_index,
                          base_fingerprint=base_fingerprint,
                          feature_length=feature_length)
    return model, train_acc


def detect(net: Network, model: DetectorModel, x: np.ndarray,
           expected_fingerprint: str | None = None) -> tuple[str, float]:
    """Classify one input; returns (verdict, score).

    Verdict is the argmax of the two detector logits on the input's local
    gradient; score is the softmax probability of the misclassified class.
    """
    if expected_fingerprint is not None and model.base_fingerprint and \
            model.base_fingerprint != expected_fingerprint:
        raise DetectorError(
            "detector was trained against a different base model "
            f"(fingerprint {model.base_fingerprint[:12]}... != "
            f"{expected_fingerprint[:12]}...)")
    rec = local_gradient(net, x, model.layer_index)
    if len(rec.features) != model.feature_length:
        raise DetectorError(
            f"feature length {len(rec.features)} != detector's "
            f"{model.feature_length}")
    feats = compress_features(rec.features, model.kappa, model.scale)
    logits = model.network.logits_batch(feats[None])[0]
    verdict = "misclassified" if int(np.argmax(logits)) == 1 else "benign"
    score = float(softmax(logits[None])[0, 1])
    return verdict, score


def detect_batch(net: Network, model: DetectorModel,
                 xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(verdicts, scores) arrays; verdicts are 0/1 ints."""
    feats = compress_features(local_gradient_batch(net, xb, model.layer_index),
                              model.kappa, model.scale)
    logits = model.network.logits_batch(feats)
    return np.argmax(logits, axis=1), softmax(logits)[:, 1]


def save_detector(model: DetectorModel, path: str | Path) -> str:
    metadata = {
        "detector": "advd",
        "layer_index": str(model.layer_index),
        "base_fingerprint": model.base_fingerprint,
        "feature_length": str(model.feature_length),
        "kappa": repr(model.kappa),
        "scale": repr(model.scale),
    }
    return save_network(model.network, path, metadata)


def load_detector(path: str | Path) -> DetectorModel:
    network, meta, _ = load_network(path)
    if meta.get("detector") != "advd":
        raise DetectorError(f"{path} is not a detector checkpoint")
    return DetectorModel(network=network,
                         layer_index=int(meta["layer_index"]),
                         base_fingerprint=meta["base_fingerprint"],
                         feature_length=int(meta["feature_length"]),
                         kappa=float(meta["kappa"]),
                         scale=float(meta["scale"]))
