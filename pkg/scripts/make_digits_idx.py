#!/usr/bin/env python3
"""Regenerate the bundled 8x8 digits IDX files from scikit-learn.

The repository ships the resulting files under data/, so this script only
needs to be re-run if the split or encoding changes.  It is the one place
that depends on scikit-learn; the package itself does not.

Usage: python scripts/make_digits_idx.py [--out data] [--seed 0] [--train 1300]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from advcheck.dataio import LabeledDataset, save_idx  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data", help="output directory")
    parser.add_argument("--seed", type=int, default=0,
                        help="shuffle seed for the train/test split")
    parser.add_argument("--train", type=int, default=1300,
                        help="number of training examples")
    args = parser.parse_args()

    from sklearn.datasets import load_digits
    digits = load_digits()
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(digits.target))
    # raw pixels are integers in [0, 16]; normalize to [0, 1]
    images = (digits.images[perm] / 16.0).astype(np.float32)[:, None, :, :]
    labels = digits.target[perm].astype(np.int64)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.train
    splits = {
        "train": LabeledDataset(images[:n], labels[:n], split="train"),
        "test": LabeledDataset(images[n:], labels[n:], split="validation"),
    }
    for name, ds in splits.items():
        save_idx(ds, out / f"digits-{name}-images.idx3",
                 out / f"digits-{name}-labels.idx1")
        print(f"{name}: {len(ds)} examples")
    return 0


if __name__ == "__main__":
    sys.exit(main())
