"""Shared fixtures: the desk-scale digits pipeline, built once per session."""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from advcheck.evalkit import (ExperimentConfig, prepare_dataset,
                              prepare_detector, prepare_model)
from advcheck.detector import default_layer

REPO_ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def repo_root() -> Path:
    return REPO_ROOT


@pytest.fixture(scope="session")
def desk_config() -> ExperimentConfig:
    config = ExperimentConfig.load(REPO_ROOT / "configs" / "desk-digits.json")
    ds = config.dataset
    config.dataset = replace(
        ds,
        train_images=str(REPO_ROOT / ds.train_images),
        train_labels=str(REPO_ROOT / ds.train_labels),
        test_images=str(REPO_ROOT / ds.test_images),
        test_labels=str(REPO_ROOT / ds.test_labels))
    return config


@pytest.fixture(scope="session")
def digits(desk_config):
    return prepare_dataset(desk_config.dataset, desk_config.seed)


@pytest.fixture(scope="session")
def work_dir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def timings() -> dict[str, float]:
    return {}


@pytest.fixture(scope="session")
def base_model(desk_config, digits, work_dir, timings):
    """Trained base classifier: (net, fingerprint, checkpoint path)."""
    train, _ = digits
    t0 = time.perf_counter()
    net, fp = prepare_model(desk_config, train, work_dir)
    timings["train_model"] = time.perf_counter() - t0
    return net, fp, work_dir / "model.ckpt"


@pytest.fixture(scope="session")
def ckpt_config(desk_config, base_model) -> ExperimentConfig:
    """Desk config pointing at the already-trained model checkpoint."""
    _, _, ckpt = base_model
    config = ExperimentConfig.from_json_dict(desk_config.to_json_dict())
    config.model = replace(config.model, checkpoint=str(ckpt))
    return config


@pytest.fixture(scope="session")
def advd(ckpt_config, base_model, digits, work_dir, timings):
    """Trained detector: (model, set of consumed train indices)."""
    net, fp, _ = base_model
    train, _ = digits
    t0 = time.perf_counter()
    model, used = prepare_detector(ckpt_config, net, fp, train, work_dir,
                                   default_layer(net))
    timings["train_detector"] = time.perf_counter() - t0
    return model, used
