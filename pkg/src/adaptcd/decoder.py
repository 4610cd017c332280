"""Progressive upsampling decoder: patch-grid change feature -> per-pixel logits."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Module, as_param, ones_param, zeros_param
from .tensor import upsample_bilinear as bilinear_upsample  # noqa: F401  (public re-export)

MIN_WIDTH = 16


def stage_widths(dim, patch_size):
    """Channel widths [C0, C1, ..., Ck] for k = log2(patch_size) stages."""
    if patch_size < 1 or patch_size & (patch_size - 1):
        raise ValueError(f"patch size {patch_size} is not a power of two")
    widths = [dim]
    for _ in range(int(math.log2(patch_size))):
        widths.append(max(widths[-1] // 2, MIN_WIDTH))
    return widths


class Conv(Module):
    def __init__(self, rng, c_in, c_out, k, dtype=np.float32):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = as_param(rng, (c_out, c_in, k, k), std=std, dtype=dtype)
        self.bias = zeros_param((c_out,), dtype=dtype)
        self._pad = k // 2

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, padding=self._pad)


class ChannelNorm(Module):
    """Per-sample, per-channel normalization over the spatial axes with affine."""

    def __init__(self, c, eps=1e-6, dtype=np.float32):
        self.gamma = ones_param((c,), dtype=dtype)
        self.beta = zeros_param((c,), dtype=dtype)
        self._eps = eps

    def __call__(self, x):
        xhat = T.standardize(x, axis=(-2, -1), eps=self._eps)
        c = self.gamma.shape[0]
        return xhat * self.gamma.reshape(c, 1, 1) + self.beta.reshape(c, 1, 1)


class Stage(Module):
    def __init__(self, rng, c_in, c_out, dtype=np.float32):
        self.conv = Conv(rng, c_in, c_out, 3, dtype=dtype)
        self.norm = ChannelNorm(c_out, dtype=dtype)

    def __call__(self, x):
        return T.upsample_bilinear(T.gelu(self.norm(self.conv(x))), 2)


class Decoder(Module):
    def __init__(self, rng, dim, patch_size, num_classes=2, dtype=np.float32):
        widths = stage_widths(dim, patch_size)
        self._stages = len(widths) - 1
        for i in range(self._stages):
            setattr(self, f"stage{i}", Stage(rng, widths[i], widths[i + 1], dtype=dtype))
        self.head = Conv(rng, widths[-1], num_classes, 1, dtype=dtype)

    def __call__(self, feature):
        """[B, D, h, w] (or unbatched [D, h, w]) -> logits [B, 2, h*P, w*P]."""
        single = feature.ndim == 3
        x = feature.reshape(1, *feature.shape) if single else feature
        for i in range(self._stages):
            x = getattr(self, f"stage{i}")(x)
        x = self.head(x)
        return x[0] if single else x
