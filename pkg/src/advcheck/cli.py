"""Single-binary CLI wiring all modules into reproducible runs.

Exit codes: 0 success, 1 runtime/pipeline error, 2 usage error.  All
randomness flows from one seed (``--seed`` flag, else ``ADVCHECK_SEED``
env var, else the config's seed, default 42).  Every run writes a
``run-manifest.json`` (config snapshot, seed, artifact hashes) to the
output directory.  Progress goes to stderr; machine-readable output
(paths, verdicts) to stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import IdxFormatError, load_idx_images
from .detector import DetectorError, detect, load_detector
from .evalkit import (ExperimentConfig, export_distributions,
                      generate_attack_set, prepare_dataset, prepare_detector,
                      prepare_model, run_experiment, sweep_layers,
                      sweep_training_source)
from .netcore import CheckpointError, TrainingError, load_network

__all__ = ["main"]


class UsageError(Exception):
    pass


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        config = ExperimentConfig.load(path)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    seed = args.seed
    if seed is None:
        env = os.environ.get("ADVCHECK_SEED")
        seed = int(env) if env else None
    if seed is not None:
        config.seed = int(seed)
    return config


def _write_manifest(out_dir: Path, subcommand: str,
                    config: ExperimentConfig | None, seed: int) -> None:
    hashes = {}
    for p in sorted(out_dir.iterdir()):
        if p.is_file() and p.name != "run-manifest.json":
            hashes[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"subcommand": subcommand, "seed": seed,
                "config": config.to_json_dict() if config else None,
                "artifacts": hashes}
    (out_dir / "run-manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _cmd_train_model(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = prepare_dataset(config.dataset, config.seed)
    _progress(f"training base model on {len(train)} examples "
              f"(epochs={config.model.epochs})")
    config = replace_model_checkpoint(config, "")
    net, fp = prepare_model(config, train, out_dir)
    from .netcore import accuracy
    acc = accuracy(net, test.images, test.labels)
    _progress(f"clean held-out accuracy: {acc:.4f}")
    _write_manifest(out_dir, "train-model", config, config.seed)
    print(str(out_dir / "model.ckpt"))
    return 0


def replace_model_checkpoint(config: ExperimentConfig,
                             checkpoint: str) -> ExperimentConfig:
    config.model = replace(config.model, checkpoint=checkpoint)
    return config


def _cmd_gen_adv(args: argparse.Namespace) -> int:
    from .dataio import save_idx_images
    from .detector import default_layer
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = prepare_dataset(config.dataset, config.seed)
    net, _ = prepare_model(config, train, out_dir)
    layer_index = default_layer(net)
    ds = train if config.eval.adversarial_source == "train" else test
    preds = net.predict_batch(ds.images)
    pool = [i for i in range(len(ds)) if preds[i] == ds.labels[i]]
    summary = {}
    for cfg in config.attacks:
        if args.attack and cfg.kind != args.attack:
            continue
        results, attempted = generate_attack_set(
            net, ds.images[pool], ds.labels[pool], cfg,
            config.eval.n_adversarial, config.seed, layer_index=layer_index,
            workers=args.workers)
        succ = [r.x_adv for r in results if r.success]
        _progress(f"{cfg.kind}: {len(succ)}/{attempted} successful")
        if succ:
            path = out_dir / f"adv-{cfg.kind}-images.idx3"
            save_idx_images(np.stack(succ), path)
        summary[cfg.kind] = {"attempted": attempted, "successes": len(succ)}
    (out_dir / "gen-adv-summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write_manifest(out_dir, "gen-adv", config, config.seed)
    print(str(out_dir / "gen-adv-summary.json"))
    return 0


def _cmd_train_detector(args: argparse.Namespace) -> int:
    from .detector import default_layer
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, _ = prepare_dataset(config.dataset, config.seed)
    net, fp = prepare_model(config, train, out_dir)
    layer_index = default_layer(net)
    _progress(f"building detector training set at layer {layer_index}")
    prepare_detector(config, net, fp, train, out_dir, layer_index)
    _write_manifest(out_dir, "train-detector", config, config.seed)
    print(str(out_dir / "detector.ckpt"))
    return 0


def _cmd_detect(args: argparse.Namespace) -> int:
    net, _, fp = load_network(args.model)
    model = load_detector(args.detector)
    images = load_idx_images(args.image)
    for x in images:
        verdict, score = detect(net, model, x, expected_fingerprint=fp)
        print(f"{verdict} {score:.6f}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    report = run_experiment(config, out_dir, workers=args.workers)
    _progress(f"benign accuracy {report.benign_accuracy:.3f}; "
              + "; ".join(f"{a.kind} DR={a.dr:.3f} AUC={a.auc:.4f}"
                          for a in report.attacks))
    _write_manifest(out_dir, "eval", config, config.seed)
    print(str(out_dir / "report.json"))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "layers":
        rows = sweep_layers(config, out_dir, workers=args.workers)
        payload = {"sweep": "layers",
                   "rows": [{"layer": name, "dr": dr} for name, dr in rows]}
    else:
        matrix = sweep_training_source(config, out_dir, workers=args.workers)
        payload = {"sweep": "training-source",
                   "rows": [{"source": name, "dr": row}
                            for name, row in matrix]}
    path = out_dir / f"sweep-{args.kind}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _write_manifest(out_dir, "sweep", config, config.seed)
    print(str(path))
    return 0


def _cmd_export_dist(args: argparse.Namespace) -> int:
    from .detector import default_layer
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = prepare_dataset(config.dataset, config.seed)
    net, _ = prepare_model(config, train, out_dir)
    layer_index = default_layer(net)
    ds = train if config.eval.adversarial_source == "train" else test
    preds = net.predict_batch(ds.images)
    pool = [i for i in range(len(ds)) if preds[i] == ds.labels[i]]
    sets = [("benign", ds.images[pool[:config.eval.n_benign]])]
    for cfg in config.attacks:
        results, _ = generate_attack_set(
            net, ds.images[pool], ds.labels[pool], cfg,
            config.eval.n_adversarial, config.seed, layer_index=layer_index,
            workers=args.workers)
        succ = [r.x_adv for r in results if r.success]
        if succ:
            sets.append((cfg.kind, np.stack(succ)))
    path = export_distributions(net, sets, layer_index,
                                Path(args.out) / "distributions.csv")
    _write_manifest(out_dir, "export-dist", config, config.seed)
    print(str(path))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advcheck",
        description="Local-gradient adversarial example detection pipeline.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
        if needs_config:
            p.add_argument("--config", required=True,
                           help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="seed override (env ADVCHECK_SEED is the fallback; "
                            "default 42)")
        p.add_argument("--out", default="advcheck-out",
                       help="output directory (default: advcheck-out)")
        p.add_argument("--workers", type=int, default=1,
                       help="evaluation fan-out (default 1)")

    p = sub.add_parser("train-model", help="train and save the base classifier")
    common(p)
    p.set_defaults(func=_cmd_train_model)

    p = sub.add_parser("gen-adv", help="generate adversarial example sets")
    common(p)
    p.add_argument("--attack", default=None,
                   help="restrict to one attack kind")
    p.set_defaults(func=_cmd_gen_adv)

    p = sub.add_parser("train-detector", help="build records and train AdvD")
    common(p)
    p.set_defaults(func=_cmd_train_detector)

    p = sub.add_parser("detect", help="classify images as benign/misclassified")
    p.add_argument("--model", required=True, help="base model checkpoint")
    p.add_argument("--detector", required=True, help="detector checkpoint")
    p.add_argument("--image", required=True, help="IDX image file")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval", help="run the full evaluation protocol")
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="sensitivity sweeps")
    common(p)
    p.add_argument("--kind", choices=("layers", "training-source"),
                   required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export-dist", help="export local-gradient distributions")
    common(p)
    p.set_defaults(func=_cmd_export_dist)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IdxFormatError, CheckpointError, DetectorError, TrainingError,
            ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
