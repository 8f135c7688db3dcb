"""Network container: forward traces and reverse-mode gradients.

A Network is an ordered sequence of layers ending in a length-``class_count``
logit vector (pre-softmax confidences).  ``forward`` records every
intermediate layer output; gradients are obtained by walking the layer chain
backwards from a seed gradient at the logits, optionally stopping at an
intermediate layer's output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import F32, Flatten, Layer, Softmax, softmax

__all__ = ["Network", "ForwardTrace", "NumericError", "ShapeError"]


class ShapeError(ValueError):
    """Input shape does not match the network's declared input shape."""


class NumericError(ArithmeticError):
    """A non-finite value was produced during forward or backward."""


@dataclass
class ForwardTrace:
    """Per-layer outputs for one example, plus logits and the argmax class."""

    outputs: list[np.ndarray]
    logits: np.ndarray
    predicted_class: int
    caches: list[object] = field(repr=False, default_factory=list)


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    class_count: int

    @classmethod
    def build(cls, layers: list[Layer], input_shape: tuple[int, ...],
              class_count: int, seed: int = 0) -> "Network":
        """Initialise parameters layer by layer with a seeded RNG."""
        rng = np.random.default_rng(seed)
        shape = tuple(int(d) for d in input_shape)
        for layer in layers:
            shape = layer.init_params(shape, rng)
        if shape != (class_count,):
            raise ValueError(
                f"network output shape {shape} != class count ({class_count},)")
        return cls(layers=layers, input_shape=tuple(int(d) for d in input_shape),
                   class_count=class_count)

    # ------------------------------------------------------------------ #
    # forward                                                            #
    # ------------------------------------------------------------------ #
    def _check_batch(self, xb: np.ndarray) -> np.ndarray:
        if tuple(xb.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"input shape {tuple(xb.shape[1:])} != expected {self.input_shape}")
        return np.ascontiguousarray(xb, dtype=F32)

    def forward_batch(self, xb: np.ndarray,
                      keep: bool = True) -> tuple[list[np.ndarray], list[object]]:
        """Run a batch through every layer; returns (outputs, caches)."""
        h = self._check_batch(xb)
        outputs: list[np.ndarray] = []
        caches: list[object] = []
        for layer in self.layers:
            h, cache = layer.forward(h)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite value after layer {layer.kind}")
            outputs.append(h)
            caches.append(cache if keep else None)
        return outputs, caches

    def forward(self, x: np.ndarray) -> ForwardTrace:
        """Forward one example, capturing all intermediate outputs."""
        outputs, caches = self.forward_batch(np.asarray(x, dtype=F32)[None])
        logits = outputs[-1][0]
        c = int(np.argmax(logits))  # argmax ties break to the lowest index
        return ForwardTrace(outputs=[o[0] for o in outputs], logits=logits,
                            predicted_class=c, caches=caches)

    def logits_batch(self, xb: np.ndarray) -> np.ndarray:
        outputs, _ = self.forward_batch(xb, keep=False)
        return outputs[-1]

    def predict(self, x: np.ndarray) -> int:
        return int(np.argmax(self.logits_batch(np.asarray(x, dtype=F32)[None])[0]))

    def predict_batch(self, xb: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits_batch(xb), axis=1)

    # ------------------------------------------------------------------ #
    # reverse mode                                                       #
    # ------------------------------------------------------------------ #
    def backward_batch(self, caches: list[object], grad_logits: np.ndarray,
                       stop_layer: int | None = None,
                       accumulate_params: bool = False) -> np.ndarray:
        """Propagate d(loss)/d(logits) back to ``stop_layer``'s output.

        ``stop_layer=None`` propagates all the way to the network input.
        With ``stop_layer=k`` the return value is d(loss)/d(output of layer k).
        """
        g = np.ascontiguousarray(grad_logits, dtype=F32)
        first = 0 if stop_layer is None else stop_layer + 1
        for i in range(len(self.layers) - 1, first - 1, -1):
            g = self.layers[i].backward(g, caches[i], accumulate_params)
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient below layer {self.layers[i].kind}")
        return g

    def _seed_from_loss(self, logits: np.ndarray, loss: str,
                        index: int) -> np.ndarray:
        """Gradient of the requested scalar loss with respect to the logits."""
        m = logits.shape[-1]
        if not 0 <= index < m:
            raise IndexError(f"class index {index} out of range [0, {m})")
        if loss == "cross_entropy":
            g = softmax(logits)
            g[..., index] -= 1.0
            return g
        if loss == "logit":
            g = np.zeros_like(logits)
            g[..., index] = 1.0
            return g
        if loss == "probability":
            p = softmax(logits)
            pc = p[..., index:index + 1]
            g = -pc * p
            g[..., index] += pc[..., 0]
            return g
        raise ValueError(f"unknown loss kind {loss!r}")

    def grad_wrt_input(self, x: np.ndarray, loss: str, index: int) -> np.ndarray:
        """d(loss)/dx for loss in {cross_entropy(label), logit(class)}."""
        trace = self.forward(np.asarray(x, dtype=F32))
        seed = self._seed_from_loss(trace.logits[None], loss, index)
        return self.backward_batch(trace.caches, seed)[0]

    def grad_wrt_input_batch(self, xb: np.ndarray, loss: str,
                             labels: np.ndarray) -> np.ndarray:
        """Per-example d(loss_i)/dx_i in one batched pass."""
        outputs, caches = self.forward_batch(xb)
        logits = outputs[-1]
        if loss == "cross_entropy":
            seed = softmax(logits)
            seed[np.arange(len(logits)), labels] -= 1.0
        else:
            raise ValueError("batched input gradients support cross_entropy only")
        return self.backward_batch(caches, seed)

    def grad_wrt_layer(self, x: np.ndarray, layer_index: int,
                       class_index: int, loss: str = "logit") -> np.ndarray:
        """d(logit of class_index)/d(output of layer ``layer_index``).

        ``loss="probability"`` instead differentiates the post-softmax
        probability of ``class_index`` (used by the detection pipeline).
        """
        if not 0 <= layer_index < len(self.layers):
            raise IndexError(
                f"layer index {layer_index} out of range [0, {len(self.layers)})")
        trace = self.forward(np.asarray(x, dtype=F32))
        seed = self._seed_from_loss(trace.logits[None], loss, class_index)
        if layer_index == len(self.layers) - 1:
            return seed[0]
        return self.backward_batch(trace.caches, seed, stop_layer=layer_index)[0]

    def grad_wrt_layer_batch(self, xb: np.ndarray, layer_index: int,
                             loss: str = "probability") -> np.ndarray:
        """Per-example layer gradients at each example's own argmax class."""
        outputs, caches = self.forward_batch(xb)
        logits = outputs[-1]
        n = len(logits)
        seed = np.zeros_like(logits)
        classes = np.argmax(logits, axis=1)
        for i in range(n):
            seed[i] = self._seed_from_loss(logits[i], loss, int(classes[i]))
        if layer_index == len(self.layers) - 1:
            return seed
        return self.backward_batch(caches, seed, stop_layer=layer_index)

    # ------------------------------------------------------------------ #
    # structure helpers                                                  #
    # ------------------------------------------------------------------ #
    def flatten_index(self) -> int:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Flatten):
                return i
        raise ValueError("network has no flatten layer")

    def layer_output_size(self, layer_index: int) -> int:
        """Flattened size of layer ``layer_index``'s output."""
        shape = self.input_shape
        rng = np.random.default_rng(0)
        probe = np.zeros((1,) + self.input_shape, dtype=F32)
        outputs, _ = self.forward_batch(probe, keep=False)
        return int(np.prod(outputs[layer_index].shape[1:]))

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def has_softmax(self) -> bool:
        return any(isinstance(layer, Softmax) for layer in self.layers)
