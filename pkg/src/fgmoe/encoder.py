"""Toy convolutional pyramid encoder.

A stand-in for a large pretrained backbone: four stages of strided 3x3
convolutions with GELU, producing features at strides 4/8/16/32 with
channel counts C', 2C', 4C', 8C'.  The first stage reaches stride 4 with
two stride-2 convolutions.  Weights are drawn from a seeded uniform
distribution and are frozen by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, conv2d, gelu
from .errors import ConfigError, DimensionError


@dataclass
class EncoderConfig:
    base_channels: int = 16
    seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")


@dataclass
class FeaturePyramid:
    """Stage outputs: x_s1 at stride 4 through x_s4 at stride 32."""
    x_s1: Tensor
    x_s2: Tensor
    x_s3: Tensor
    x_s4: Tensor

    @property
    def stages(self):
        return (self.x_s1, self.x_s2, self.x_s3, self.x_s4)


def _uniform(rng: np.random.Generator, shape, fan_in: int, trainable: bool) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=trainable)


class Encoder:
    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        c = cfg.base_channels
        trainable = not cfg.frozen
        rng = np.random.default_rng((cfg.seed, 0))
        # (in, out) per strided conv; stage outputs are taken after convs 1..4
        plan = [(3, c), (c, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 8 * c)]
        self.weights = []
        self.biases = []
        for cin, cout in plan:
            fan_in = 9 * cin
            self.weights.append(_uniform(rng, (3, 3, cin, cout), fan_in, trainable))
            self.biases.append(Tensor(np.zeros(cout), requires_grad=trainable))

    @property
    def frozen(self) -> bool:
        return self.cfg.frozen

    def encode(self, image: Tensor) -> FeaturePyramid:
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError(f"encoder expects an H x W x 3 image, got {image.shape}")
        h, w, _ = image.shape
        if h % 32 or w % 32:
            raise DimensionError(
                f"image size {h}x{w} must be divisible by 32 (pyramid reaches stride 32)")
        x = image
        stages = []
        for i, (wt, bt) in enumerate(zip(self.weights, self.biases)):
            x = gelu(conv2d(x, wt, bt, stride=2, padding=1))
            if i >= 1:
                stages.append(x)
        return FeaturePyramid(*stages)

    def named_params(self):
        out = []
        for i, (wt, bt) in enumerate(zip(self.weights, self.biases)):
            out.append((f"encoder.conv{i}.weight", wt))
            out.append((f"encoder.conv{i}.bias", bt))
        return out
