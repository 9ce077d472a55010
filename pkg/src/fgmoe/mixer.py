"""Per-task feature mixer: pointwise channel mixing, deformable spatial
mixing with learned offsets, and multi-head self-attention over the
flattened token sequence.

The deformable step predicts, per output position, a (dy, dx) offset for
each of the nine 3x3 kernel taps, samples the input bilinearly at
(position + tap + offset) with zero padding, and combines the samples
depthwise: output channel c is sum_k W_d[k, c] * sample_k[c].  The offset
predictor starts at zero, so the initial layer is exactly a standard 3x3
depthwise convolution.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (BatchNorm, Tensor, bilinear_sample, conv2d, gelu,
                       layer_norm, linear, softmax)
from .errors import ConfigError, DimensionError

# 3x3 tap offsets in row-major order
_TAPS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)


class DeformableMixer:
    def __init__(self, channels: int, heads: int = 4, seed: int = 0, stream: int = 0):
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        rng = np.random.default_rng((seed, 2, stream))
        c = channels
        b = 1.0 / np.sqrt(c)
        u = lambda shape, bound: Tensor(rng.uniform(-bound, bound, size=shape),
                                        requires_grad=True)
        self.w_p = u((c, c), b)
        self.b_p = Tensor(np.zeros(c), requires_grad=True)
        self.bn1 = BatchNorm(c)
        # offset predictor starts at zero so sampling starts on the lattice
        self.offset_w = Tensor(np.zeros((3, 3, c, 18)), requires_grad=True)
        self.offset_b = Tensor(np.zeros(18), requires_grad=True)
        self.w_d = u((9, c), 1.0 / 3.0)
        self.bn2 = BatchNorm(c)
        self.ln_gain = Tensor(np.ones(c), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(c), requires_grad=True)
        self.w_q = u((c, c), b)
        self.w_k = u((c, c), b)
        self.w_v = u((c, c), b)
        self.w_o = u((c, c), b)

    # ---- stages ---------------------------------------------------------

    def channel_mix(self, x: Tensor, training: bool) -> Tensor:
        h, w, c = x.shape
        if c != self.channels:
            raise DimensionError(f"mixer built for {self.channels} channels, input has {c}")
        y = linear(x.reshape(h * w, c), self.w_p, self.b_p).reshape(h, w, c)
        return self.bn1(gelu(y), training)

    def deformable_mix(self, x: Tensor, training: bool) -> Tensor:
        h, w, c = x.shape
        offsets = conv2d(x, self.offset_w, self.offset_b, stride=1, padding=1)
        offsets = offsets.reshape(h, w, 9, 2)
        base = (np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), axis=-1)
                [:, :, None, :] + _TAPS[None, None, :, :])
        pts = (offsets + base).reshape(h * w * 9, 2)
        samples = bilinear_sample(x, pts).reshape(h, w, 9, c)
        dc = (samples * self.w_d.reshape(1, 1, 9, c)).sum(axis=2)
        return x + self.bn2(gelu(dc), training)

    def flatten_norm(self, x: Tensor) -> Tensor:
        h, w, c = x.shape
        return layer_norm(x.reshape(h * w, c), self.ln_gain, self.ln_bias)

    def self_attention(self, x: Tensor, return_weights: bool = False):
        n, c = x.shape
        hd = self.heads
        dk = c // hd
        q = linear(x, self.w_q).reshape(n, hd, dk).transpose(1, 0, 2)
        k = linear(x, self.w_k).reshape(n, hd, dk).transpose(1, 0, 2)
        v = linear(x, self.w_v).reshape(n, hd, dk).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dk))
        weights = softmax(scores, axis=-1)
        out = linear((weights @ v).transpose(1, 0, 2).reshape(n, c), self.w_o)
        if return_weights:
            return out, weights
        return out

    def forward(self, x: Tensor, training: bool) -> Tensor:
        """Full mixer: spatial map in, token sequence (N x C) out."""
        y = self.channel_mix(x, training)
        y = self.deformable_mix(y, training)
        return self.self_attention(self.flatten_norm(y))

    # ---- parameters -----------------------------------------------------

    def named_params(self, prefix: str):
        items = [("w_p", self.w_p), ("b_p", self.b_p),
                 ("bn1.gain", self.bn1.gain), ("bn1.bias", self.bn1.bias),
                 ("offset.weight", self.offset_w), ("offset.bias", self.offset_b),
                 ("w_d", self.w_d),
                 ("bn2.gain", self.bn2.gain), ("bn2.bias", self.bn2.bias),
                 ("ln.gain", self.ln_gain), ("ln.bias", self.ln_bias),
                 ("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]
        return [(f"{prefix}.{k}", v) for k, v in items]

    def named_buffers(self, prefix: str):
        return [(f"{prefix}.bn1.running_mean", self.bn1.running_mean),
                (f"{prefix}.bn1.running_var", self.bn1.running_var),
                (f"{prefix}.bn2.running_mean", self.bn2.running_mean),
                (f"{prefix}.bn2.running_var", self.bn2.running_var)]
