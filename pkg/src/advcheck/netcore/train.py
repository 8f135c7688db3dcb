"""Mini-batch SGD with momentum for classifier and detector networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import F32, softmax
from .network import Network, NumericError

__all__ = ["SGDOptions", "TrainingError", "train_classifier", "cross_entropy_loss"]


class TrainingError(RuntimeError):
    """Raised on divergence (non-finite training loss)."""


@dataclass(frozen=True)
class SGDOptions:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 400
    batch_size: int = 32
    seed: int = 0


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray,
                       class_weights: np.ndarray | None = None
                       ) -> tuple[float, np.ndarray]:
    """Mean (optionally class-weighted) cross entropy and its logit gradient."""
    n = len(logits)
    p = softmax(logits)
    idx = np.arange(n)
    eps = np.float32(1e-12)
    per_example = -np.log(p[idx, labels] + eps)
    w = np.ones(n, dtype=F32)
    if class_weights is not None:
        w = class_weights[labels].astype(F32)
    loss = float(np.sum(per_example * w) / n)
    grad = p.copy()
    grad[idx, labels] -= 1.0
    grad *= (w / n)[:, None]
    return loss, grad.astype(F32)


def train_classifier(net: Network, images: np.ndarray, labels: np.ndarray,
                     opt: SGDOptions,
                     class_weights: np.ndarray | None = None) -> Network:
    """Train ``net`` in place with seeded, fully deterministic SGD.

    Returns the same network object.  Raises :class:`TrainingError` with the
    epoch index if the loss turns non-finite.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= net.class_count:
        raise ValueError("labels out of range for the network's class count")
    rng = np.random.default_rng(opt.seed)
    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    xb_all = np.ascontiguousarray(images, dtype=F32)
    yb_all = np.asarray(labels)
    for epoch in range(opt.epochs):
        order = rng.permutation(len(xb_all))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), opt.batch_size):
            sel = order[start:start + opt.batch_size]
            xb, yb = xb_all[sel], yb_all[sel]
            try:
                outputs, caches = net.forward_batch(xb)
            except NumericError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: {exc}") from exc
            loss, grad_logits = cross_entropy_loss(outputs[-1], yb, class_weights)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged (NaN loss) at epoch {epoch}")
            epoch_loss += loss
            batches += 1
            net.backward_batch(caches, grad_logits, accumulate_params=True)
            i = 0
            for layer in net.layers:
                for p, g in zip(layer.params(), layer.grads()):
                    velocity[i] = opt.momentum * velocity[i] + g
                    p -= opt.learning_rate * velocity[i]
                    i += 1
    return net


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Fraction of examples whose argmax prediction matches the label."""
    hits = 0
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        hits += int(np.sum(net.predict_batch(xb) == yb))
    return hits / len(images)
