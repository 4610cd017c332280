"""The assembled change detector: shared ViT -> PEFT hooks -> MCA fusion -> decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import weights
from .decoder import Decoder
from .fusion import McaBlock, to_grid
from .nn import Module
from .vit import ViTBackbone, ViTConfig


# Per-channel input normalization applied to [0, 1] pixels before patchify
# (the statistics DINO-style ViT checkpoints are trained with).
IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


class PeftContainer(Module):
    """Holds the per-layer PEFT modules (``layer0``, ``layer1``, ...)."""


class ChangeDetector(Module):
    def __init__(self, vit_config: ViTConfig, rngs, num_frames=2, dtype=np.float32):
        self.vit_config = vit_config
        self.backbone = ViTBackbone(vit_config, rngs["backbone"], dtype=dtype)
        self.peft = PeftContainer()
        self.fusion = McaBlock(rngs["fusion"], vit_config.dim, num_frames, vit_config.mlp_ratio, dtype=dtype)
        self.decoder = Decoder(rngs["decoder"], vit_config.dim, vit_config.patch_size, dtype=dtype)
        self.method = None

    @property
    def dtype(self):
        return self.backbone.pos_embed.dtype

    def normalize(self, frames):
        mean = IMAGE_MEAN.reshape(3, 1, 1).astype(self.dtype)
        std = IMAGE_STD.reshape(3, 1, 1).astype(self.dtype)
        return (frames - mean) / std

    def __call__(self, frames):
        """``frames [B, T, 3, H, W]`` (or ``[T, 3, H, W]``) -> logits ``[B, 2, H, W]``."""
        frames = T.as_tensor(frames, dtype=self.dtype)
        if frames.dtype != self.dtype:
            frames = T.Tensor(frames.data.astype(self.dtype), requires_grad=frames.requires_grad)
        z = self.backbone(self.normalize(frames))
        change = to_grid(self.fusion(z), self.vit_config.grid)
        return self.decoder(change)

    def predict(self, frames):
        """Binary change masks, thresholding p(changed) > 0.5."""
        with T.no_grad():
            logits = self(frames).data
        return (logits[..., 1, :, :] > logits[..., 0, :, :]).astype(np.uint8)

    # ------------------------------------------------------------- partitions
    def named_trainable(self):
        return [(n, p) for n, p in self.named_parameters() if not p.frozen]

    def named_frozen(self):
        return [(n, p) for n, p in self.named_parameters() if p.frozen]

    def save_full(self, path):
        weights.save_params(path, self.named_parameters())

    def save_checkpoint(self, path):
        """Store only the trainable parameters."""
        weights.save_params(path, self.named_trainable())

    def load_checkpoint(self, path):
        weights.load_into(self.named_trainable(), path)

    def load_backbone(self, path):
        weights.load_into(self.backbone.named_parameters("backbone."), path)
