"""Adversarial and noise-based example generation.

White-box attacks (fgsm/bim/pgd/adaptive) query input gradients; black-box
generators (auna/noisy_misclassify) query only the predicted class.  Every
returned :class:`AttackResult` satisfies the configured norm budget
(``<= epsilon + 1e-6``) and keeps pixels in [0, 1].  Success is defined
against the model's original prediction: ``predict(x_adv) != predict(x)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .netcore import Network
from .netcore.layers import F32

__all__ = ["AttackConfig", "AttackResult", "fgsm", "bim", "pgd", "auna",
           "noisy_misclassify", "adaptive", "run_attack", "ATTACK_KINDS"]

log = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "bim", "pgd", "auna", "noisy", "adaptive")


@dataclass(frozen=True)
class AttackConfig:
    """Attack parameters; serialized JSON field names match exactly:
    kind, norm, epsilon, step_size, max_iterations, lambda, seed."""

    kind: str
    norm: str
    epsilon: float
    step_size: float = 0.0
    max_iterations: int = 1
    lambda_: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.norm not in ("l_inf", "l_2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        expected = "l_inf" if self.kind in ("fgsm", "bim", "pgd") else "l_2"
        if self.norm != expected:
            raise ValueError(f"{self.kind} uses {expected}, got {self.norm}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kind in ("bim", "pgd", "adaptive") and self.step_size <= 0:
            raise ValueError(f"{self.kind} requires a positive step_size")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "norm": self.norm, "epsilon": self.epsilon,
                "step_size": self.step_size,
                "max_iterations": self.max_iterations,
                "lambda": self.lambda_, "seed": self.seed}

    @classmethod
    def from_json_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=seed)


# Reference attack configurations for full-scale image benchmarks.
DEFAULT_CONFIGS = {
    "fgsm": AttackConfig("fgsm", "l_inf", epsilon=0.2),
    "bim": AttackConfig("bim", "l_inf", epsilon=0.3, step_size=0.05,
                        max_iterations=10),
    "pgd": AttackConfig("pgd", "l_inf", epsilon=0.3, step_size=0.01,
                        max_iterations=40),
    "auna": AttackConfig("auna", "l_2", epsilon=0.2, max_iterations=1000),
    "noisy": AttackConfig("noisy", "l_2", epsilon=0.25, max_iterations=1000),
    "adaptive": AttackConfig("adaptive", "l_2", epsilon=2.5, step_size=0.01,
                             max_iterations=10, lambda_=1.0),
}


@dataclass(frozen=True)
class AttackResult:
    x_adv: np.ndarray
    success: bool
    perturbation_l2: float
    iterations_used: int


def _l2(delta: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(delta, dtype=np.float64))))


def _project(x_adv: np.ndarray, x0: np.ndarray, norm: str,
             epsilon: float) -> np.ndarray:
    """Project onto the epsilon-ball around x0, then clip to pixel range."""
    delta = x_adv - x0
    if norm == "l_inf":
        delta = np.clip(delta, -epsilon, epsilon)
    else:
        nrm = _l2(delta)
        if nrm > epsilon:
            delta = delta * (epsilon / nrm)
    return np.clip(x0 + delta, 0.0, 1.0).astype(F32)


def _result(x0: np.ndarray, x_adv: np.ndarray, original_class: int,
            net: Network, iterations: int) -> AttackResult:
    success = net.predict(x_adv) != original_class
    return AttackResult(x_adv=x_adv, success=bool(success),
                        perturbation_l2=_l2(x_adv - x0),
                        iterations_used=iterations)


def fgsm(net: Network, x: np.ndarray, y: int, cfg: AttackConfig) -> AttackResult:
    """Single step along the sign of the cross-entropy input gradient."""
    x0 = np.asarray(x, dtype=F32)
    c0 = net.predict(x0)
    g = net.grad_wrt_input(x0, "cross_entropy", y)
    if not np.any(g):
        return AttackResult(x_adv=x0.copy(), success=False,
                            perturbation_l2=0.0, iterations_used=1)
    x_adv = _project(x0 + cfg.epsilon * np.sign(g), x0, cfg.norm, cfg.epsilon)
    return _result(x0, x_adv, c0, net, 1)


def _iterated(net: Network, x: np.ndarray, y: int, cfg: AttackConfig,
              random_start: bool,
              rng: np.random.Generator | None) -> AttackResult:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x0 = np.asarray(x, dtype=F32)
    c0 = net.predict(x0)
    x_adv = x0.copy()
    if random_start:
        x_adv = _project(
            x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, x0.shape).astype(F32),
            x0, cfg.norm, cfg.epsilon)
    used = 0
    for _ in range(cfg.max_iterations):
        if net.predict(x_adv) != c0:
            break
        used += 1
        g = net.grad_wrt_input(x_adv, "cross_entropy", y)
        x_adv = _project(x_adv + cfg.step_size * np.sign(g), x0, cfg.norm,
                         cfg.epsilon)
    return _result(x0, x_adv, c0, net, used)


def bim(net: Network, x: np.ndarray, y: int, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> AttackResult:
    """Iterated FGSM, re-projected to the l_inf ball; stops early on success."""
    return _iterated(net, x, y, cfg, random_start=False, rng=rng)


def pgd(net: Network, x: np.ndarray, y: int, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> AttackResult:
    """BIM plus a seeded uniform random start inside the epsilon-ball."""
    return _iterated(net, x, y, cfg, random_start=True, rng=rng)


def _noise_loop(net: Network, x: np.ndarray, epsilon: float,
                max_iterations: int, rng: np.random.Generator,
                noise: str) -> AttackResult:
    """Sample noise at a radius growing linearly to epsilon; first fooling wins."""
    x0 = np.asarray(x, dtype=F32)
    c0 = net.predict(x0)
    for t in range(1, max_iterations + 1):
        r = epsilon * t / max_iterations
        if noise == "uniform":
            d = rng.uniform(-1.0, 1.0, x0.shape)
        else:
            d = rng.normal(0.0, 1.0, x0.shape)
        nrm = _l2(d)
        if nrm == 0.0:
            continue
        x_adv = _project(x0 + (r / nrm) * d.astype(F32), x0, "l_2", epsilon)
        if net.predict(x_adv) != c0:
            return AttackResult(x_adv=x_adv, success=True,
                                perturbation_l2=_l2(x_adv - x0),
                                iterations_used=t)
    return AttackResult(x_adv=x0.copy(), success=False, perturbation_l2=0.0,
                        iterations_used=max_iterations)


def auna(net: Network, x: np.ndarray, cfg: AttackConfig,
         rng: np.random.Generator | None = None) -> AttackResult:
    """Additive uniform noise attack (black box)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return _noise_loop(net, x, cfg.epsilon, cfg.max_iterations, rng, "uniform")


def noisy_misclassify(net: Network, x: np.ndarray, bound_l2: float = 0.25,
                      max_attempts: int = 1000,
                      rng: np.random.Generator | None = None,
                      noise: str = "uniform") -> AttackResult:
    """Noise until misclassified; the detector's positive-class generator."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return _noise_loop(net, x, bound_l2, max_attempts, rng, noise)


def adaptive(net: Network, x: np.ndarray, y: int, layer_index: int,
             cfg: AttackConfig, rng: np.random.Generator | None = None,
             objective_log: list | None = None) -> AttackResult:
    """Detector-aware attack: minimize MSE(mu(x), mu(x_adv)) - lambda * CE.

    Gradient descent on the combined objective for ``max_iterations`` rounds
    with step ``step_size``; the MSE term's input gradient is estimated by
    central finite differences over a random subspace of at most 64 pixel
    coordinates per round (second-order autodiff avoided by design).  The
    update uses the max-normalized combined gradient; iterates stay inside
    the l_2 epsilon-ball and the pixel box.
    """
    if not 0 <= layer_index < len(net.layers):
        raise IndexError(f"layer index {layer_index} out of range")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x0 = np.asarray(x, dtype=F32)
    c0 = net.predict(x0)
    mu0 = net.grad_wrt_layer_batch(x0[None], layer_index, "probability")
    mu0 = mu0.reshape(1, -1)
    n_pix = int(np.prod(x0.shape))
    k = min(64, n_pix)
    h = np.float32(1e-3)
    x_adv = x0.copy()
    for _ in range(cfg.max_iterations):
        gce = net.grad_wrt_input(x_adv, "cross_entropy", y)
        coords = rng.choice(n_pix, size=k, replace=False)
        flat = x_adv.reshape(-1)
        probes = np.repeat(flat[None, :], 2 * k, axis=0)
        probes[np.arange(k), coords] += h
        probes[np.arange(k) + k, coords] -= h
        mus = net.grad_wrt_layer_batch(
            probes.reshape((2 * k,) + x0.shape), layer_index, "probability")
        mus = mus.reshape(2 * k, -1)
        mse = np.mean((mus - mu0) ** 2, axis=1, dtype=np.float64)
        gmse_flat = np.zeros(n_pix, dtype=F32)
        gmse_flat[coords] = ((mse[:k] - mse[k:]) / (2.0 * float(h))).astype(F32)
        g = gmse_flat.reshape(x0.shape) - cfg.lambda_ * gce
        gmax = float(np.max(np.abs(g)))
        if gmax > 0:
            g = g / gmax
        x_adv = _project(x_adv - cfg.step_size * g, x0, cfg.norm, cfg.epsilon)
        if objective_log is not None:
            mu_now = net.grad_wrt_layer_batch(x_adv[None], layer_index,
                                              "probability").reshape(1, -1)
            trace = net.forward(x_adv)
            zs = trace.logits - trace.logits.max()
            ce = float(np.log(np.sum(np.exp(zs))) - zs[y])
            objective_log.append(
                float(np.mean((mu_now - mu0) ** 2)) - cfg.lambda_ * ce)
    return _result(x0, x_adv, c0, net, cfg.max_iterations)


def run_attack(net: Network, x: np.ndarray, y: int, cfg: AttackConfig,
               layer_index: int | None = None,
               rng: np.random.Generator | None = None) -> AttackResult:
    """Dispatch on cfg.kind (layer_index required for the adaptive kind)."""
    if cfg.kind == "fgsm":
        return fgsm(net, x, y, cfg)
    if cfg.kind == "bim":
        return bim(net, x, y, cfg, rng)
    if cfg.kind == "pgd":
        return pgd(net, x, y, cfg, rng)
    if cfg.kind == "auna":
        return auna(net, x, cfg, rng)
    if cfg.kind == "noisy":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        return noisy_misclassify(net, x, cfg.epsilon, cfg.max_iterations, rng)
    if cfg.kind == "adaptive":
        if layer_index is None:
            raise ValueError("adaptive attack requires a layer_index")
        return adaptive(net, x, y, layer_index, cfg, rng)
    raise ValueError(f"unknown attack kind {cfg.kind!r}")
