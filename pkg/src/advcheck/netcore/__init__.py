"""Minimal tensor/layer engine with reverse-mode gradients."""

from .layers import (Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU, Softmax,
                     softmax)
from .network import ForwardTrace, Network, NumericError, ShapeError
from .train import (SGDOptions, TrainingError, accuracy, cross_entropy_loss,
                    train_classifier)
from .checkpoint import (CheckpointError, fingerprint, load_network,
                         save_network)

__all__ = [
    "Conv2D", "Dense", "Flatten", "Layer", "MaxPool2D", "ReLU", "Softmax",
    "softmax", "ForwardTrace", "Network", "NumericError", "ShapeError",
    "SGDOptions", "TrainingError", "accuracy", "cross_entropy_loss",
    "train_classifier", "CheckpointError", "fingerprint", "load_network",
    "save_network",
]
