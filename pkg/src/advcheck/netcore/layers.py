"""Layer primitives: forward and backward passes on batched float32 arrays.

Every layer operates on a batch-leading array (``(B, C, H, W)`` for spatial
layers, ``(B, F)`` for dense layers).  ``forward`` returns the output plus an
opaque cache consumed by ``backward``; ``backward`` maps the gradient of a
scalar loss with respect to the layer output back to the gradient with
respect to the layer input and, where applicable, the parameter gradients.

Conventions (documented, load-bearing for reproducibility):
  * ReLU subgradient at exactly 0 pre-activation is 0.
  * Max-pool ties route the gradient to the first (lowest flat index) maximum.
  * All arithmetic is float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Layer",
    "Conv2D",
    "MaxPool2D",
    "Dense",
    "ReLU",
    "Flatten",
    "Softmax",
    "layer_from_header",
]

F32 = np.float32


def _as_f32(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def xavier_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Seeded uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    s = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-s, s, size=shape).astype(F32)


@dataclass
class Layer:
    """Base layer; concrete layers override the hooks below."""

    kind = "layer"

    def init_params(self, input_shape: tuple[int, ...],
                    rng: np.random.Generator) -> tuple[int, ...]:
        """Allocate parameters for ``input_shape`` and return the output shape."""
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, cache: object,
                 accumulate_params: bool = False) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def header_fields(self) -> dict[str, str]:
        return {}


def _im2col(x: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    """(B, C, H, W) -> (B, H2 * W2, C * kh * kw) patch matrix, valid padding."""
    b, c, h, w = x.shape
    h2, w2 = h - kh + 1, w - kw + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, h2, w2, kh, kw), strides=(sb, sc, sh, sw, sh, sw))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h2 * w2, c * kh * kw)
    return np.ascontiguousarray(cols), h2, w2


@dataclass
class Conv2D(Layer):
    """Valid-padding stride-1 2-D convolution."""

    out_channels: int
    kernel: int
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    _gw: np.ndarray | None = field(default=None, repr=False)
    _gb: np.ndarray | None = field(default=None, repr=False)
    _in_shape: tuple[int, ...] | None = field(default=None, repr=False)

    kind = "conv2d"

    def init_params(self, input_shape, rng):
        c, h, w = input_shape
        if h < self.kernel or w < self.kernel:
            raise ValueError(
                f"conv2d kernel {self.kernel} exceeds input {input_shape}")
        fan_in = c * self.kernel * self.kernel
        fan_out = self.out_channels * self.kernel * self.kernel
        self.weight = xavier_uniform(
            (self.out_channels, c, self.kernel, self.kernel), fan_in, fan_out, rng)
        self.bias = np.zeros(self.out_channels, dtype=F32)
        self._in_shape = (c, h, w)
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def forward(self, x):
        cols, h2, w2 = _im2col(x, self.kernel, self.kernel)
        wmat = self.weight.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias
        out = out.transpose(0, 2, 1).reshape(x.shape[0], self.out_channels, h2, w2)
        return _as_f32(out), (cols, x.shape, h2, w2)

    def backward(self, grad_out, cache, accumulate_params=False):
        cols, x_shape, h2, w2 = cache
        b, c, h, w = x_shape
        gmat = grad_out.reshape(b, self.out_channels, h2 * w2).transpose(0, 2, 1)
        if accumulate_params:
            gw = np.einsum("bpo,bpk->ok", gmat, cols, optimize=True)
            self._gw = gw.reshape(self.weight.shape).astype(F32)
            self._gb = grad_out.sum(axis=(0, 2, 3)).astype(F32)
        wmat = self.weight.reshape(self.out_channels, -1)
        gcols = gmat @ wmat  # (B, H2*W2, C*kh*kw)
        grad_in = np.zeros((b, c, h, w), dtype=F32)
        k = self.kernel
        gcols = gcols.reshape(b, h2, w2, c, k, k)
        for di in range(k):
            for dj in range(k):
                grad_in[:, :, di:di + h2, dj:dj + w2] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return grad_in

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self._gw, self._gb]

    def header_fields(self):
        return {"out_channels": str(self.out_channels), "kernel": str(self.kernel)}


@dataclass
class MaxPool2D(Layer):
    """Non-overlapping max pooling (kernel == stride)."""

    kernel: int = 2

    kind = "maxpool2d"

    def init_params(self, input_shape, rng):
        c, h, w = input_shape
        if h % self.kernel or w % self.kernel:
            raise ValueError(
                f"maxpool2d kernel {self.kernel} does not tile input {input_shape}")
        return (c, h // self.kernel, w // self.kernel)

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.kernel
        win = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // k, w // k, k * k)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return _as_f32(out), (arg, x.shape)

    def backward(self, grad_out, cache, accumulate_params=False):
        arg, x_shape = cache
        b, c, h, w = x_shape
        k = self.kernel
        gwin = np.zeros((b, c, h // k, w // k, k * k), dtype=F32)
        np.put_along_axis(gwin, arg[..., None], grad_out[..., None], axis=-1)
        gwin = gwin.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return gwin.reshape(b, c, h, w)

    def header_fields(self):
        return {"kernel": str(self.kernel)}


@dataclass
class Dense(Layer):
    """Affine layer y = x W^T + b with W of shape (units, fan_in)."""

    units: int
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    _gw: np.ndarray | None = field(default=None, repr=False)
    _gb: np.ndarray | None = field(default=None, repr=False)

    kind = "dense"

    def init_params(self, input_shape, rng):
        if len(input_shape) != 1:
            raise ValueError(f"dense expects a flat input, got {input_shape}")
        fan_in = input_shape[0]
        self.weight = xavier_uniform((self.units, fan_in), fan_in, self.units, rng)
        self.bias = np.zeros(self.units, dtype=F32)
        return (self.units,)

    def forward(self, x):
        return _as_f32(x @ self.weight.T + self.bias), x

    def backward(self, grad_out, cache, accumulate_params=False):
        x = cache
        if accumulate_params:
            self._gw = (grad_out.T @ x).astype(F32)
            self._gb = grad_out.sum(axis=0).astype(F32)
        return _as_f32(grad_out @ self.weight)

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self._gw, self._gb]

    def header_fields(self):
        return {"units": str(self.units)}


@dataclass
class ReLU(Layer):
    kind = "relu"

    def init_params(self, input_shape, rng):
        return input_shape

    def forward(self, x):
        mask = x > 0  # derivative at exactly 0 is 0
        return _as_f32(x * mask), mask

    def backward(self, grad_out, cache, accumulate_params=False):
        return _as_f32(grad_out * cache)


@dataclass
class Flatten(Layer):
    kind = "flatten"

    def init_params(self, input_shape, rng):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return _as_f32(x.reshape(x.shape[0], -1)), x.shape

    def backward(self, grad_out, cache, accumulate_params=False):
        return _as_f32(grad_out.reshape(cache))


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z, dtype=F32)
    return _as_f32(e / e.sum(axis=-1, keepdims=True))


@dataclass
class Softmax(Layer):
    kind = "softmax"

    def init_params(self, input_shape, rng):
        return input_shape

    def forward(self, x):
        p = softmax(x)
        return p, p

    def backward(self, grad_out, cache, accumulate_params=False):
        p = cache
        inner = (grad_out * p).sum(axis=-1, keepdims=True)
        return _as_f32(p * (grad_out - inner))


_LAYER_KINDS = {
    "conv2d": lambda f: Conv2D(out_channels=int(f["out_channels"]), kernel=int(f["kernel"])),
    "maxpool2d": lambda f: MaxPool2D(kernel=int(f["kernel"])),
    "dense": lambda f: Dense(units=int(f["units"])),
    "relu": lambda f: ReLU(),
    "flatten": lambda f: Flatten(),
    "softmax": lambda f: Softmax(),
}


def layer_from_header(kind: str, fields: dict[str, str]) -> Layer:
    """Rebuild a layer from its checkpoint header record."""
    try:
        return _LAYER_KINDS[kind](fields)
    except KeyError as exc:
        raise ValueError(f"unknown layer kind {kind!r}") from exc
