"""Feature aggregation: upsample all pyramid stages to stride 4, concatenate,
and project to the decoder width."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, bilinear_sample, concat, linear, upsample_nearest
from .encoder import FeaturePyramid
from .errors import ConfigError, DimensionError


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear alternative to nearest upsampling (edge-clamped sample grid)."""
    if factor not in (1, 2, 4, 8):
        raise ConfigError(f"unsupported upsampling factor {factor}; expected one of 1, 2, 4, 8")
    if factor == 1:
        return x
    h, w, c = x.shape
    rows = (np.arange(h * factor) + 0.5) / factor - 0.5
    cols = (np.arange(w * factor) + 0.5) / factor - 0.5
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    pts = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    return bilinear_sample(x, pts).reshape(h * factor, w * factor, c)


class Aggregator:
    """Concatenates stages 1-4 (C'' = 15 C' channels) and projects to C."""

    def __init__(self, base_channels: int, out_channels: int | None = None,
                 seed: int = 0, mode: str = "nearest"):
        if mode not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown upsampling mode {mode!r}")
        self.base_channels = base_channels
        self.concat_channels = 15 * base_channels
        self.out_channels = out_channels if out_channels is not None else 2 * base_channels
        self.mode = mode
        rng = np.random.default_rng((seed, 1))
        bound = 1.0 / np.sqrt(self.concat_channels)
        self.weight = Tensor(rng.uniform(-bound, bound,
                                         size=(self.concat_channels, self.out_channels)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)

    def __call__(self, pyr: FeaturePyramid) -> Tensor:
        c = self.base_channels
        expected = (c, 2 * c, 4 * c, 8 * c)
        got = tuple(s.shape[2] for s in pyr.stages)
        if got != expected:
            raise ConfigError(
                f"pyramid channels {got} do not match projection built for {expected}")
        up = upsample_nearest if self.mode == "nearest" else upsample_bilinear
        maps = [pyr.x_s1] + [up(s, f) for s, f in zip(pyr.stages[1:], (2, 4, 8))]
        h, w = maps[0].shape[0], maps[0].shape[1]
        for m in maps[1:]:
            if m.shape[0] != h or m.shape[1] != w:
                raise DimensionError(f"upsampled stage {m.shape} does not align to {h}x{w}")
        x = concat(maps, axis=-1)
        flat = x.reshape(h * w, self.concat_channels)
        return linear(flat, self.weight, self.bias).reshape(h, w, self.out_channels)

    def named_params(self):
        return [("aggregator.weight", self.weight), ("aggregator.bias", self.bias)]
