"""Sequential layers with hand-written backward passes.

Every layer caches what it needs during a ``Mode.TRAIN`` forward and
consumes it in ``backward``. Parameters live in ``layer.params`` and
their gradients in ``layer.grads`` (same keys, same shapes).
"""

from __future__ import annotations

import enum
import math
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigError(ValueError):
    """Invalid layer / model / experiment configuration."""


class StateError(RuntimeError):
    """Operation invoked in the wrong lifecycle state."""


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    # eval-mode normalisation while recording input statistics
    COLLECT = "collect"


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Layer:
    """Base class. Subclasses fill ``params`` and implement the passes."""

    kind = "layer"

    def __init__(self):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        self._cache = None

    # names of params that never leave the client (HBN's alpha)
    local_param_names: tuple[str, ...] = ()

    def forward(self, x: np.ndarray, mode: Mode = Mode.TRAIN) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a prior train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def astype(self, dtype) -> "Layer":
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        return self

    def zero_grad(self) -> None:
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise ConfigError("conv2d: channels/kernel/stride must be positive, padding >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def _windows(self, x):
        p, s, k = self.padding, self.stride, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # (N, C, H', W', k, k)
        return xp, sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x, mode=Mode.TRAIN):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ConfigError(
                f"conv2d: expected (N, {self.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] + 2 * self.padding < self.kernel_size or x.shape[3] + 2 * self.padding < self.kernel_size:
            raise ConfigError("conv2d: kernel larger than padded input")
        w, b = self.params["weight"], self.params["bias"]
        xp, cols = self._windows(x)
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', Cout)
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        if mode is Mode.TRAIN:
            self._cache = (x.shape, xp.shape, cols)
        return np.ascontiguousarray(out)

    def backward(self, dy):
        x_shape, xp_shape, cols = self._take_cache()
        w = self.params["weight"]
        k, s, p = self.kernel_size, self.stride, self.padding
        self.grads["weight"] = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        ho, wo = dy.shape[2], dy.shape[3]
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                # (N, Cout, H', W') x (Cout, Cin) -> (N, Cin, H', W')
                contrib = np.tensordot(dy, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib
        if p:
            dxp = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        return np.ascontiguousarray(dxp)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        if min(in_features, out_features) < 1:
            raise ConfigError("dense: feature counts must be positive")
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = kaiming_uniform(rng, (out_features, in_features), in_features)
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    def forward(self, x, mode=Mode.TRAIN):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ConfigError(f"dense: expected (N, {self.in_features}) input, got {x.shape}")
        if mode is Mode.TRAIN:
            self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        x = self._take_cache()
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode=Mode.TRAIN):
        mask = x > 0
        if mode is Mode.TRAIN:
            self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class MaxPool2d(Layer):
    """Max pooling; gradient goes to the first maximum of each window."""

    kind = "maxpool2d"

    def __init__(self, pool_size: int = 2, stride: int | None = None):
        super().__init__()
        stride = pool_size if stride is None else stride
        if pool_size < 1 or stride < 1:
            raise ConfigError("maxpool2d: pool size and stride must be positive")
        self.pool_size = pool_size
        self.stride = stride

    def forward(self, x, mode=Mode.TRAIN):
        k, s = self.pool_size, self.stride
        if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
            raise ConfigError(f"maxpool2d: input {x.shape} smaller than pool {k}")
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if mode is Mode.TRAIN:
            self._cache = (x.shape, idx)
        return out

    def backward(self, dy):
        x_shape, idx = self._take_cache()
        k, s = self.pool_size, self.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dy * (idx == i * k + j)
        return dx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode=Mode.TRAIN):
        if mode is Mode.TRAIN:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())


class Sequential:
    """Ordered layer stack with stable, positionally aligned parameter names."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x: np.ndarray, mode: Mode = Mode.TRAIN, stop: int | None = None) -> np.ndarray:
        """Run the stack; with ``stop`` only layers ``[0, stop]`` are applied."""
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, mode)
            if stop is not None and i == stop:
                break
        return x

    __call__ = forward

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_layers(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def norm_layers(self):
        from fedhbn.normalization import NormLayer

        return [(n, l) for n, l in self.named_layers() if isinstance(l, NormLayer)]

    def trainable(self) -> "OrderedDict[str, np.ndarray]":
        """All gradient-updated parameters, including client-local ones."""
        out = OrderedDict()
        for name, layer in self.named_layers():
            for k, v in layer.params.items():
                out[f"{name}.{k}"] = v
        return out

    def weights(self) -> "OrderedDict[str, np.ndarray]":
        """Communicated parameters (omega): excludes client-local parameters."""
        out = OrderedDict()
        for name, layer in self.named_layers():
            for k, v in layer.params.items():
                if k not in layer.local_param_names:
                    out[f"{name}.{k}"] = v
        return out

    def local_params(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, layer in self.named_layers():
            for k in layer.local_param_names:
                out[f"{name}.{k}"] = layer.params[k]
        return out

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, layer in self.named_layers():
            for k in layer.params:
                out[f"{name}.{k}"] = layer.grads[k]
        return out

    def set_params(self, values: dict) -> None:
        """Copy named values into the matching parameters (missing names untouched)."""
        for name, layer in self.named_layers():
            for k in layer.params:
                key = f"{name}.{k}"
                if key in values:
                    v = np.asarray(values[key])
                    if v.shape != layer.params[k].shape:
                        raise ConfigError(f"shape mismatch for {key}: {v.shape} vs {layer.params[k].shape}")
                    layer.params[k] = v.astype(layer.params[k].dtype, copy=True)

    def num_params(self) -> int:
        return sum(v.size for v in self.trainable().values())

    def astype(self, dtype) -> "Sequential":
        for layer in self.layers:
            layer.astype(dtype)
        return self
