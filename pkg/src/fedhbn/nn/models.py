from __future__ import annotations

import numpy as np

from fedhbn.nn.layers import (ConfigError, Conv2d, Dense, Flatten, MaxPool2d, ReLU,
                              Sequential, conv_output_size)

# kept literal: normalization imports nn.layers, so importing it here at module load would be circular
NORM_CHOICES = ("bn", "gn", "ln", "fixbn", "fbn", "hbn", "none")
CONV_WIDTHS = (16, 32, 64)


def build_simple_cnn(num_classes: int = 10, norm_kind: str = "hbn", *, in_channels: int = 3,
                     image_size: int = 32, hidden: int = 128, seed: int = 0,
                     eps: float = 1e-5) -> Sequential:
    """Three conv blocks (conv3x3 -> norm -> ReLU -> maxpool2) then FC -> ReLU -> FC.

    With 32x32 inputs the flattened feature size is 64 * 4 * 4 = 1024.
    """
    from fedhbn.normalization import make_norm

    if norm_kind not in NORM_CHOICES:
        raise ConfigError(f"unknown norm kind {norm_kind!r}; expected one of {NORM_CHOICES}")
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng(seed)
    layers = []
    c_in, size = in_channels, image_size
    for width in CONV_WIDTHS:
        layers.append(Conv2d(c_in, width, 3, 1, 1, rng=rng))
        if norm_kind != "none":
            layers.append(make_norm(norm_kind, width, eps))
        layers.append(ReLU())
        layers.append(MaxPool2d(2, 2))
        size = conv_output_size(size, 2, 2, 0)
        if size < 1:
            raise ConfigError(f"image size {image_size} too small for three pooling stages")
        c_in = width
    layers += [Flatten(), Dense(c_in * size * size, hidden, rng=rng), ReLU(),
               Dense(hidden, num_classes, rng=rng)]
    return Sequential(layers)
