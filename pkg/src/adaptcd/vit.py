"""Plain (single-scale) vision transformer encoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, as_param, zeros_param


@dataclass
class ViTConfig:
    image_size: int = 256
    patch_size: int = 16
    depth: int = 12
    dim: int = 384
    heads: int = 6
    mlp_ratio: int = 4
    in_chans: int = 3

    def validate(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        for key in ("image_size", "patch_size", "depth", "dim", "heads", "mlp_ratio", "in_chans"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        return self

    @property
    def grid(self):
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_patches(self):
        return self.grid[0] * self.grid[1]

    def to_dict(self):
        return asdict(self)


def patchify(images, patch_size):
    """Split ``[..., C, H, W]`` into ``[..., N, P*P*C]`` non-overlapping patches.

    Patches are ordered row-major over the patch grid; each row holds its
    P x P x C block flattened as (row, col, channel).
    """
    images = T.as_tensor(images)
    *lead, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n = len(lead)
    x = images.reshape(*lead, c, gh, p, gw, p)
    x = x.transpose(*range(n), n + 1, n + 3, n + 2, n + 4, n)
    return x.reshape(*lead, gh * gw, p * p * c)


class Attention(Module):
    """Multi-head self-attention with per-head scale sqrt(D / heads)."""

    def __init__(self, rng, dim, heads, dtype=np.float32):
        self.wq = as_param(rng, (dim, dim), dtype=dtype)
        self.bq = zeros_param((dim,), dtype=dtype)
        self.wk = as_param(rng, (dim, dim), dtype=dtype)
        self.bk = zeros_param((dim,), dtype=dtype)
        self.wv = as_param(rng, (dim, dim), dtype=dtype)
        self.bv = zeros_param((dim,), dtype=dtype)
        self.wo = as_param(rng, (dim, dim), dtype=dtype)
        self.bo = zeros_param((dim,), dtype=dtype)
        self._heads = heads
        self._lora = {}
        self._ia3 = None
        self.last_attn = None
        self.keep_attn = False

    def project(self, x, which):
        """x W + b for one of the q/k/v/o projections, plus a LoRA term if attached."""
        out = x @ getattr(self, "w" + which) + getattr(self, "b" + which)
        lora = self._lora.get(which)
        if lora is not None:
            out = out + lora(x)
        return out

    def __call__(self, x):
        *lead, m, d = x.shape
        h = self._heads
        dh = d // h
        q = self.project(x, "q")
        k = self.project(x, "k")
        v = self.project(x, "v")
        if self._ia3 is not None:
            k = k * self._ia3.l_k
            v = v * self._ia3.l_v
        n = len(lead)
        perm = (*range(n), n + 1, n, n + 2)
        q = q.reshape(*lead, m, h, dh).transpose(perm)
        k = k.reshape(*lead, m, h, dh).transpose(perm)
        v = v.reshape(*lead, m, h, dh).transpose(perm)
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if self.keep_attn:
            self.last_attn = attn.data
        out = (attn @ v).transpose(perm).reshape(*lead, m, d)
        return self.project(out, "o")


class TransformerLayer(Module):
    """Pre-norm block: z += MSA(LN1 z); z += MLP(LN2 z) (+ optional PEFT hooks)."""

    def __init__(self, rng, dim, heads, mlp_ratio, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(rng, dim, heads, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(rng, dim, dim * mlp_ratio, dtype=dtype)
        self._adapter = None
        self._prefix = None

    def __call__(self, z):
        if self._prefix is not None:
            z = self._prefix.prepend(z)
        z = z + self.attn(self.ln1(z))
        out = z + self.mlp(self.ln2(z))
        if self._adapter is not None:
            # parallel bottleneck branch reads the post-attention feature
            out = out + self._adapter(z)
        if self._prefix is not None:
            out = self._prefix.strip(out)
        return out


class ViTBackbone(Module):
    def __init__(self, config: ViTConfig, rng, dtype=np.float32):
        config.validate()
        self.config = config
        d = config.dim
        p = config.patch_size
        self.patch_embed = Linear(rng, p * p * config.in_chans, d, dtype=dtype)
        self.cls_token = as_param(rng, (1, d), dtype=dtype)
        self.pos_embed = as_param(rng, (config.num_patches + 1, d), dtype=dtype)
        for i in range(config.depth):
            setattr(self, f"layer{i}", TransformerLayer(rng, d, config.heads, config.mlp_ratio, dtype=dtype))

    @property
    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.config.depth)]

    def embed(self, patches):
        """Patch embedding, class-token prepend and position embedding: [..., N+1, D]."""
        *lead, n, _ = patches.shape
        if n + 1 != self.pos_embed.shape[0]:
            raise ValueError(
                f"{n} patches do not match position embedding for {self.pos_embed.shape[0] - 1} patches"
            )
        x = self.patch_embed(patches)
        cls = T.broadcast_to(self.cls_token, (*lead, 1, self.config.dim))
        return T.concat([cls, x], axis=-2) + self.pos_embed

    def __call__(self, images):
        """``[..., T, C, H, W]`` frames -> ``[..., T, N, D]`` patch features.

        Frames are encoded independently with shared weights; the class token
        is dropped from the output.
        """
        images = T.as_tensor(images)
        z = self.embed(patchify(images, self.config.patch_size))
        for layer in self.layers:
            z = layer(z)
        return z[..., 1:, :]
