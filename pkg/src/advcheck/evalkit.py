"""Metrics, experiment orchestration, sensitivity sweeps, distribution export."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, AttackResult, run_attack
from .dataio import LabeledDataset, load_idx, synth_dataset
from .detector import (DetectorModel, detect_batch, generate_training_inputs,
                       local_gradient_batch, records_from_inputs,
                       train_detector)
from .netcore import (Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU,
                      SGDOptions, accuracy, load_network, save_network,
                      train_classifier)
from .netcore.layers import F32

__all__ = ["asr", "detection_rate", "auc", "perturbation_l2",
           "mann_whitney_p", "EvalReport", "AttackReport", "ExperimentConfig",
           "run_experiment", "sweep_layers", "sweep_training_source",
           "export_distributions", "build_classifier", "prepare_dataset",
           "prepare_model", "generate_attack_set"]


# --------------------------------------------------------------------- #
# metrics                                                               #
# --------------------------------------------------------------------- #
def asr(results: list[AttackResult]) -> float:
    """Attack success rate: fraction of attempted inputs whose prediction flips."""
    if not results:
        raise ValueError("asr of an empty result sequence")
    return sum(r.success for r in results) / len(results)


def detection_rate(verdicts: np.ndarray | list[int]) -> float:
    """Fraction of (misclassified) inputs flagged by the detector."""
    v = np.asarray(verdicts)
    if v.size == 0:
        return 0.0
    return float(np.mean(v == 1))


def auc(scores_benign: np.ndarray | list[float],
        scores_misclassified: np.ndarray | list[float]) -> float:
    """Normalized Mann-Whitney U: P(misclassified score > benign score),
    ties counted 1/2.  Computed by direct pairwise comparison."""
    sb = np.asarray(scores_benign, dtype=np.float64)
    sm = np.asarray(scores_misclassified, dtype=np.float64)
    if sb.size == 0 or sm.size == 0:
        raise ValueError("auc requires non-empty score sequences")
    greater = np.sum(sm[:, None] > sb[None, :])
    ties = np.sum(sm[:, None] == sb[None, :])
    return float((greater + 0.5 * ties) / (sm.size * sb.size))


def perturbation_l2(x: np.ndarray, x_adv: np.ndarray) -> float:
    """rho = ||x_adv - x||_2."""
    return float(np.sqrt(np.sum(np.square(
        np.asarray(x_adv, dtype=np.float64) - np.asarray(x, dtype=np.float64)))))


def mann_whitney_p(sample_low: np.ndarray, sample_high: np.ndarray) -> float:
    """One-sided Mann-Whitney U p-value (H1: sample_high > sample_low).

    Normal approximation with tie correction — adequate here because the
    separations under test are extreme.
    """
    a = np.asarray(sample_low, dtype=np.float64)
    b = np.asarray(sample_high, dtype=np.float64)
    n1, n2 = a.size, b.size
    u = np.sum(b[:, None] > a[None, :]) + 0.5 * np.sum(b[:, None] == a[None, :])
    mu = n1 * n2 / 2.0
    combined = np.concatenate([a, b])
    _, counts = np.unique(combined, return_counts=True)
    n = n1 + n2
    tie_term = np.sum(counts ** 3 - counts) / (n * (n - 1)) if n > 1 else 0.0
    sigma2 = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if sigma2 <= 0:
        return 1.0
    z = (u - mu) / math.sqrt(sigma2)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# --------------------------------------------------------------------- #
# configuration                                                         #
# --------------------------------------------------------------------- #
@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synth"  # "synth" or "idx"
    synth_kind: str = "gaussian_blobs"
    n_train: int = 400
    n_test: int = 100
    classes: int = 4
    image_side: int = 8
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ModelSpec:
    checkpoint: str = ""
    conv_channels: int = 16
    hidden_units: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 400
    batch_size: int = 32


@dataclass(frozen=True)
class DetectorSpec:
    checkpoint: str = ""
    structure: tuple[int, ...] = (512, 2)
    epochs: int = 7
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    n_benign: int = 10
    n_misclassified: int = 200
    noise_bound_l2: float = 0.25
    noise_max_attempts: int = 1000
    class_weighting: bool = True


@dataclass(frozen=True)
class EvalSpec:
    n_adversarial: int = 200
    n_benign: int = 200
    adversarial_source: str = "test"   # which split attacks draw from
    benign_source: str = "train"       # which split benign accuracy uses
    fp_examples: bool = False          # score naturally misclassified inputs


@dataclass
class ExperimentConfig:
    seed: int = 42
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    attacks: list[AttackConfig] = field(default_factory=list)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def to_json_dict(self) -> dict:
        d = {"seed": self.seed,
             "dataset": asdict(self.dataset),
             "model": asdict(self.model),
             "detector": dict(asdict(self.detector),
                              structure=list(self.detector.structure)),
             "attacks": [a.to_json_dict() for a in self.attacks],
             "eval": asdict(self.eval)}
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        det = dict(d.get("detector", {}))
        if "structure" in det:
            det["structure"] = tuple(det["structure"])
        return cls(
            seed=int(d.get("seed", 42)),
            dataset=DatasetSpec(**d.get("dataset", {})),
            model=ModelSpec(**d.get("model", {})),
            detector=DetectorSpec(**det),
            attacks=[AttackConfig.from_json_dict(a)
                     for a in d.get("attacks", [])],
            eval=EvalSpec(**d.get("eval", {})))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


# --------------------------------------------------------------------- #
# reports                                                               #
# --------------------------------------------------------------------- #
@dataclass
class AttackReport:
    kind: str
    n_attempted: int
    n_success: int
    asr: float
    dr: float
    auc: float
    mean_perturbation_l2: float
    detection_seconds_per_image: float | None = None


@dataclass
class EvalReport:
    seed: int
    benign_accuracy: float
    n_benign: int
    clean_test_accuracy: float
    attacks: list[AttackReport]
    fp_detection_rate: float | None
    config: dict

    def to_json(self, include_timing: bool = False) -> str:
        d = {"seed": self.seed,
             "benign_accuracy": self.benign_accuracy,
             "n_benign": self.n_benign,
             "clean_test_accuracy": self.clean_test_accuracy,
             "fp_detection_rate": self.fp_detection_rate,
             "config": self.config,
             "attacks": []}
        for a in self.attacks:
            ad = asdict(a)
            if not include_timing:
                ad.pop("detection_seconds_per_image")
            d["attacks"].append(ad)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        attacks = [AttackReport(**a) for a in d.pop("attacks")]
        return cls(attacks=attacks, **d)


# --------------------------------------------------------------------- #
# pipeline pieces                                                       #
# --------------------------------------------------------------------- #
def build_classifier(input_shape: tuple[int, ...], classes: int,
                     conv_channels: int, hidden_units: int,
                     seed: int) -> Network:
    """conv(3x3) -> relu -> maxpool(2) -> flatten -> dense -> relu -> dense."""
    layers = [Conv2D(out_channels=conv_channels, kernel=3), ReLU(),
              MaxPool2D(kernel=2), Flatten(), Dense(units=hidden_units),
              ReLU(), Dense(units=classes)]
    return Network.build(layers, input_shape, classes, seed=seed)


def prepare_dataset(spec: DatasetSpec,
                    seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Return (train, test) per the dataset spec."""
    if spec.kind == "idx":
        train = load_idx(spec.train_images, spec.train_labels, split="train")
        test = load_idx(spec.test_images, spec.test_labels, split="validation")
        return train, test
    if spec.kind == "synth":
        train = synth_dataset(spec.synth_kind, spec.n_train, spec.classes,
                              spec.image_side, seed=seed)
        test = synth_dataset(spec.synth_kind, spec.n_test, spec.classes,
                             spec.image_side, seed=seed + 1)
        test.split = "validation"
        return train, test
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def prepare_model(config: ExperimentConfig, train: LabeledDataset,
                  out_dir: Path) -> tuple[Network, str]:
    """Load or train the base classifier; returns (net, fingerprint)."""
    spec = config.model
    classes = int(train.labels.max()) + 1
    if spec.checkpoint:
        net, _, fp = load_network(spec.checkpoint)
        return net, fp
    net = build_classifier(tuple(train.images.shape[1:]), classes,
                           spec.conv_channels, spec.hidden_units,
                           seed=config.seed)
    opt = SGDOptions(learning_rate=spec.learning_rate, momentum=spec.momentum,
                     epochs=spec.epochs, batch_size=spec.batch_size,
                     seed=config.seed)
    train_classifier(net, train.images, train.labels, opt)
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = save_network(net, out_dir / "model.ckpt")
    return net, fp


def prepare_detector(config: ExperimentConfig, net: Network,
                     fingerprint: str, train: LabeledDataset, out_dir: Path,
                     layer_index: int) -> tuple[DetectorModel, set[int]]:
    """Load or train AdvD; returns (model, train-split indices it consumed)."""
    from .detector import load_detector  # local import avoids cycle at module load
    spec = config.detector
    if spec.checkpoint:
        return load_detector(spec.checkpoint), set()
    bx, bi, nx, ni = generate_training_inputs(
        net, train, spec.n_benign, spec.n_misclassified, spec.noise_bound_l2,
        seed=config.seed, max_attempts=spec.noise_max_attempts)
    records = records_from_inputs(net, layer_index, bx, bi, nx, ni)
    model, _ = train_detector(
        records, structure=spec.structure, epochs=spec.epochs,
        batch_size=spec.batch_size, seed=config.seed,
        learning_rate=spec.learning_rate, momentum=spec.momentum,
        class_weighting=spec.class_weighting, base_fingerprint=fingerprint,
        layer_index=layer_index)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .detector import save_detector
    save_detector(model, out_dir / "detector.ckpt")
    return model, set(bi) | set(ni)


def generate_attack_set(net: Network, images: np.ndarray, labels: np.ndarray,
                        cfg: AttackConfig, n_target: int, seed: int,
                        layer_index: int | None = None,
                        workers: int = 1) -> tuple[list[AttackResult], int]:
    """Attack pool examples in order until ``n_target`` successes.

    Returns (all results up to and including the n-th success, attempted
    count).  Results are deterministic for a fixed seed and independent of
    ``workers`` (the pool is processed in order and truncated at the n-th
    success).
    """
    def one(i: int) -> AttackResult:
        rng = np.random.default_rng([seed, cfg.seed, i])
        return run_attack(net, images[i], int(labels[i]), cfg,
                          layer_index=layer_index, rng=rng)

    results: list[AttackResult] = []
    successes = 0
    n = len(images)
    chunk = max(1, workers * 8)
    pos = 0
    while pos < n and successes < n_target:
        idx = list(range(pos, min(n, pos + chunk)))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                batch = list(pool.map(one, idx))
        else:
            batch = [one(i) for i in idx]
        for r in batch:
            results.append(r)
            if r.success:
                successes += 1
                if successes >= n_target:
                    break
        pos += len(idx)
    return results, len(results)


def _correct_indices(net: Network, ds: LabeledDataset) -> list[int]:
    preds = net.predict_batch(ds.images)
    return [i for i in range(len(ds)) if preds[i] == ds.labels[i]]


# --------------------------------------------------------------------- #
# run_experiment                                                        #
# --------------------------------------------------------------------- #
def run_experiment(config: ExperimentConfig, out_dir: str | Path,
                   workers: int = 1) -> EvalReport:
    """End-to-end protocol: train/load model + detector, attack, score.

    Writes ``report.json`` (deterministic), ``timing.json`` (measured) and
    ``distributions.csv`` to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = prepare_dataset(config.dataset, config.seed)
    net, fp = prepare_model(config, train, out_dir)
    from .detector import default_layer
    layer_index = default_layer(net)
    model, used = prepare_detector(config, net, fp, train, out_dir, layer_index)

    clean_acc = accuracy(net, test.images, test.labels)

    # benign evaluation pool
    benign_ds = train if config.eval.benign_source == "train" else test
    benign_used = used if config.eval.benign_source == "train" else set()
    benign_pool = [i for i in _correct_indices(net, benign_ds)
                   if i not in benign_used]
    benign_idx = benign_pool[:config.eval.n_benign]
    benign_x = benign_ds.images[benign_idx]
    bverd, bscores = detect_batch(net, model, benign_x)
    benign_accuracy = float(np.mean(bverd == 0))

    # adversarial source pool
    adv_ds = train if config.eval.adversarial_source == "train" else test
    adv_excluded = set(benign_idx) if adv_ds is benign_ds else set()
    adv_excluded |= used if adv_ds is train else set()
    adv_pool = [i for i in _correct_indices(net, adv_ds)
                if i not in adv_excluded]
    pool_x = adv_ds.images[adv_pool]
    pool_y = adv_ds.labels[adv_pool]

    dist_sets: list[tuple[str, np.ndarray]] = [("benign", benign_x)]
    attack_reports = []
    for cfg in config.attacks:
        results, attempted = generate_attack_set(
            net, pool_x, pool_y, cfg, config.eval.n_adversarial, config.seed,
            layer_index=layer_index, workers=workers)
        succ = [r for r in results if r.success]
        if succ:
            adv_x = np.stack([r.x_adv for r in succ])
            verd, scores = detect_batch(net, model, adv_x)
            dr = detection_rate(verd)
            auc_val = auc(bscores, scores)
            mean_l2 = float(np.mean([r.perturbation_l2 for r in succ]))
            t0 = time.perf_counter()
            reps = max(1, math.ceil(100 / len(adv_x)))
            for _ in range(reps):
                detect_batch(net, model, adv_x)
            dt = (time.perf_counter() - t0) / (reps * len(adv_x))
            dist_sets.append((cfg.kind, adv_x))
        else:
            dr, auc_val, mean_l2, dt = 0.0, 0.5, 0.0, None
        attack_reports.append(AttackReport(
            kind=cfg.kind, n_attempted=attempted, n_success=len(succ),
            asr=asr(results) if results else 0.0, dr=dr, auc=auc_val,
            mean_perturbation_l2=mean_l2, detection_seconds_per_image=dt))

    fp_rate = None
    if config.eval.fp_examples:
        preds = net.predict_batch(train.images)
        wrong = [i for i in range(len(train)) if preds[i] != train.labels[i]]
        if wrong:
            verd, _ = detect_batch(net, model, train.images[wrong])
            fp_rate = detection_rate(verd)

    report = EvalReport(seed=config.seed, benign_accuracy=benign_accuracy,
                        n_benign=len(benign_idx),
                        clean_test_accuracy=clean_acc,
                        attacks=attack_reports, fp_detection_rate=fp_rate,
                        config=config.to_json_dict())
    (out_dir / "report.json").write_text(report.to_json())
    timing = {a.kind: a.detection_seconds_per_image for a in attack_reports}
    (out_dir / "timing.json").write_text(
        json.dumps(timing, sort_keys=True, indent=2) + "\n")
    export_distributions(net, dist_sets, layer_index,
                         out_dir / "distributions.csv")
    return report


# --------------------------------------------------------------------- #
# sweeps                                                                #
# --------------------------------------------------------------------- #
ELIGIBLE_SWEEP_KINDS = ("conv2d", "dense", "flatten")


def sweep_layers(config: ExperimentConfig, out_dir: str | Path,
                 workers: int = 1) -> list[tuple[str, float]]:
    """Train one detector per eligible layer; report DR on FGSM."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = prepare_dataset(config.dataset, config.seed)
    net, fp = prepare_model(config, train, out_dir)
    spec = config.detector
    bx, bi, nx, ni = generate_training_inputs(
        net, train, spec.n_benign, spec.n_misclassified, spec.noise_bound_l2,
        seed=config.seed, max_attempts=spec.noise_max_attempts)
    used = set(bi) | set(ni)

    fgsm_cfg = next((a for a in config.attacks if a.kind == "fgsm"), None)
    if fgsm_cfg is None:
        raise ValueError("sweep_layers requires an fgsm attack config")
    adv_ds = train if config.eval.adversarial_source == "train" else test
    pool = [i for i in _correct_indices(net, adv_ds)
            if not (adv_ds is train and i in used)]
    results, _ = generate_attack_set(net, adv_ds.images[pool],
                                     adv_ds.labels[pool], fgsm_cfg,
                                     config.eval.n_adversarial, config.seed,
                                     workers=workers)
    adv_x = np.stack([r.x_adv for r in results if r.success])

    rows: list[tuple[str, float]] = []
    for li, layer in enumerate(net.layers):
        if layer.kind not in ELIGIBLE_SWEEP_KINDS:
            continue
        records = records_from_inputs(net, li, bx, bi, nx, ni)
        model, _ = train_detector(
            records, structure=spec.structure, epochs=spec.epochs,
            batch_size=spec.batch_size, seed=config.seed,
            learning_rate=spec.learning_rate, momentum=spec.momentum,
            class_weighting=spec.class_weighting, base_fingerprint=fp,
            layer_index=li)
        verd, _ = detect_batch(net, model, adv_x)
        rows.append((f"{li}:{layer.kind}", detection_rate(verd)))
    return rows


def sweep_training_source(config: ExperimentConfig, out_dir: str | Path,
                          workers: int = 1
                          ) -> list[tuple[str, dict[str, float]]]:
    """DR matrix: detector trained on each source, evaluated on each target.

    Train sources: uniform noise, Gaussian noise, FGSM, PGD.  Eval targets:
    FGSM, PGD, noise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = prepare_dataset(config.dataset, config.seed)
    net, fp = prepare_model(config, train, out_dir)
    from .detector import default_layer
    layer_index = default_layer(net)
    spec = config.detector

    by_kind = {a.kind: a for a in config.attacks}
    for needed in ("fgsm", "pgd"):
        if needed not in by_kind:
            raise ValueError(f"sweep_training_source needs a {needed} config")

    # training-source inputs (all drawn from the front of the train split)
    bx, bi, nx_u, ni_u = generate_training_inputs(
        net, train, spec.n_benign, spec.n_misclassified, spec.noise_bound_l2,
        seed=config.seed, max_attempts=spec.noise_max_attempts)
    _, _, nx_g, ni_g = generate_training_inputs(
        net, train, spec.n_benign, spec.n_misclassified, spec.noise_bound_l2,
        seed=config.seed, max_attempts=spec.noise_max_attempts,
        noise="gaussian")
    used = set(bi) | set(ni_u) | set(ni_g)
    correct_train = [i for i in _correct_indices(net, train) if i not in used]
    half = len(correct_train) // 2
    src_pool, ev_pool = correct_train[:half], correct_train[half:]

    def attack_inputs(kind: str, pool: list[int], n: int, salt: int
                      ) -> tuple[np.ndarray, list[int]]:
        cfg = by_kind[kind]
        results, _ = generate_attack_set(
            net, train.images[pool], train.labels[pool], cfg, n,
            config.seed + salt, workers=workers)
        xs = [r.x_adv for r in results if r.success]
        consumed = pool[:len(results)]
        return np.stack(xs), consumed

    fgsm_src, _ = attack_inputs("fgsm", src_pool, spec.n_misclassified, 1)
    pgd_src, _ = attack_inputs("pgd", src_pool, spec.n_misclassified, 2)
    fgsm_ev, _ = attack_inputs("fgsm", ev_pool, config.eval.n_adversarial, 3)
    pgd_ev, _ = attack_inputs("pgd", ev_pool, config.eval.n_adversarial, 4)
    rng = np.random.default_rng([config.seed, 5])
    noise_ev = []
    from .attacks import noisy_misclassify
    for i in ev_pool:
        if len(noise_ev) >= config.eval.n_adversarial:
            break
        res = noisy_misclassify(net, train.images[i], spec.noise_bound_l2,
                                max_attempts=spec.noise_max_attempts, rng=rng)
        if res.success:
            noise_ev.append(res.x_adv)
    targets = {"fgsm": fgsm_ev, "pgd": pgd_ev, "noise": np.stack(noise_ev)}

    sources = {"uniform_noise": (nx_u, ni_u), "gaussian_noise": (nx_g, ni_g),
               "fgsm": (fgsm_src, list(range(len(fgsm_src)))),
               "pgd": (pgd_src, list(range(len(pgd_src))))}
    matrix: list[tuple[str, dict[str, float]]] = []
    for name, (sx, si) in sources.items():
        records = records_from_inputs(net, layer_index, bx, bi, sx, si,
                                      noisy_source=name)
        model, _ = train_detector(
            records, structure=spec.structure, epochs=spec.epochs,
            batch_size=spec.batch_size, seed=config.seed,
            learning_rate=spec.learning_rate, momentum=spec.momentum,
            class_weighting=spec.class_weighting, base_fingerprint=fp,
            layer_index=layer_index)
        row = {}
        for tname, tx in targets.items():
            verd, _ = detect_batch(net, model, tx)
            row[tname] = detection_rate(verd)
        matrix.append((name, row))
    return matrix


# --------------------------------------------------------------------- #
# distribution export                                                   #
# --------------------------------------------------------------------- #
def export_distributions(net: Network, datasets: list[tuple[str, np.ndarray]],
                         layer_index: int, out_path: str | Path) -> Path:
    """CSV of per-example raw feature stats: source,example_index,min,max,median."""
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source", "example_index", "min", "max", "median"])
        for source, images in datasets:
            if len(images) == 0:
                continue
            feats = local_gradient_batch(net, images, layer_index)
            for i, row in enumerate(feats):
                writer.writerow([source, i, repr(float(row.min())),
                                 repr(float(row.max())),
                                 repr(float(np.median(row)))])
    return out_path
