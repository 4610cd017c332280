"""Masked cross-attention temporal fusion.

A single learned mask-query token attends, independently at every patch
position, over the T frame features of that position. Scores are therefore
an ``N x T`` array per sample; no patch-to-patch attention is formed.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, as_param


class McaBlock(Module):
    def __init__(self, rng, dim, num_frames=2, mlp_ratio=4, dtype=np.float32):
        self.temporal_pos = as_param(rng, (num_frames, dim), dtype=dtype)
        self.mask_query = as_param(rng, (1, dim), dtype=dtype)
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.ln3 = LayerNorm(dim, dtype=dtype)
        self.query = Linear(rng, dim, dim, dtype=dtype)
        self.key = Linear(rng, dim, dim, dtype=dtype)
        self.value = Linear(rng, dim, dim, dtype=dtype)
        self.out = Linear(rng, dim, dim, dtype=dtype)
        self.mlp = MLP(rng, dim, dim * mlp_ratio, dtype=dtype)
        self._dim = dim
        self.last_attn = None

    @property
    def num_frames(self):
        return self.temporal_pos.shape[0]

    def temporal_stack(self, z):
        """[..., T, N, D] -> [..., N, T, D] with the temporal embedding added."""
        if z.shape[-3] != self.num_frames:
            raise ValueError(f"got {z.shape[-3]} frames, block was built for {self.num_frames}")
        return T.swapaxes(z, -3, -2) + self.temporal_pos

    def attend(self, zm, zt):
        """One MCA step on ``zm [..., N, 1, D]`` and ``zt [..., N, T, D]``."""
        kv_in = self.ln1(zt)
        q = self.query(self.ln2(zm))
        k = self.key(kv_in)
        v = self.value(kv_in)
        # elementwise product + reduction keeps each score independent of frame order
        scores = (q * k).sum(axis=-1) * (1.0 / math.sqrt(self._dim))
        attn = T.softmax(scores, axis=-1)
        self.last_attn = T.expand_dims(attn, -2).data
        o = (T.expand_dims(attn, -1) * v).sum(axis=-2, keepdims=True)
        zm = zm + self.out(o)
        return zm + self.mlp(self.ln3(zm))

    def __call__(self, features):
        """[..., T, N, D] -> fused [..., N, D]."""
        zt = self.temporal_stack(T.as_tensor(features))
        *lead, n, _, d = zt.shape
        zm = T.broadcast_to(self.mask_query, (*lead, n, 1, d))
        return self.attend(zm, zt)[..., 0, :]


def to_grid(tokens, grid):
    """[..., N, D] token rows -> [..., D, gh, gw] feature map (row-major)."""
    gh, gw = grid
    tokens = T.as_tensor(tokens)
    *lead, n, d = tokens.shape
    if n != gh * gw:
        raise ValueError(f"{n} tokens do not fill a {gh}x{gw} grid")
    k = len(lead)
    x = tokens.reshape(*lead, gh, gw, d)
    return x.transpose(*range(k), k + 2, k, k + 1)


def fuse(block, features, grid):
    """Temporal fusion of ``[..., T, N, D]`` into a ``[..., D, gh, gw]`` change feature."""
    return to_grid(block(features), grid)
