"""Parameter-efficient tuning: adapter, LoRA, IA3, prefix, linear probe, full.

Every method attaches its modules to the backbone through private hook
attributes, while the parameters themselves live under ``model.peft`` so the
backbone's own parameter set (and its weight file) is method independent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import ChangeDetector
from .nn import Module, Parameter, ones_param, trunc_normal, zeros_param
from .vit import ViTConfig

METHODS = ("adapter", "lora", "ia3", "prefix", "linear_probe", "full")
LORA_TARGETS = ("q", "k", "v", "o")
IA3_TARGETS = ("k", "v", "mlp")


@dataclass
class PeftConfig:
    method: str = "adapter"
    r: float = 6.0
    s: float = 1.0
    rank: int = 1
    lora_targets: list = field(default_factory=lambda: list(LORA_TARGETS))
    ia3_targets: list = field(default_factory=lambda: list(IA3_TARGETS))
    prefix_len: int = 10

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown PEFT method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.r < 1:
            raise ValueError("adapter reduction factor r must be >= 1")
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be >= 1")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}")
        bad = set(self.ia3_targets) - set(IA3_TARGETS)
        if bad:
            raise ValueError(f"unknown IA3 targets {sorted(bad)}")
        return self

    def to_dict(self):
        return asdict(self)


def bottleneck_dim(dim, r):
    return max(1, int(round(dim / r)))


class Adapter(Module):
    """s * W_up(GELU(W_down z)); W_up starts at zero so the branch is silent at init."""

    def __init__(self, rng, dim, hidden, scale=1.0, dtype=np.float32):
        self.w_down = Parameter(trunc_normal(rng, (dim, hidden)).astype(dtype))
        self.b_down = zeros_param((hidden,), dtype=dtype)
        self.w_up = zeros_param((hidden, dim), dtype=dtype)
        self.b_up = zeros_param((dim,), dtype=dtype)
        self.scale = scale

    def __call__(self, z):
        h = T.gelu(z @ self.w_down + self.b_down)
        return (h @ self.w_up + self.b_up) * self.scale


class LoraPair(Module):
    """Low-rank update x A B for a frozen [d, k] weight; B starts at zero."""

    def __init__(self, rng, d, k, rank, dtype=np.float32):
        self.a = Parameter(rng.normal(0.0, 0.02, size=(d, rank)).astype(dtype))
        self.b = zeros_param((rank, k), dtype=dtype)

    def __call__(self, x):
        return (x @ self.a) @ self.b

    def delta(self):
        return self.a.data @ self.b.data


class Ia3(Module):
    def __init__(self, dim, hidden, targets, dtype=np.float32):
        self.l_k = ones_param((dim,), dtype=dtype) if "k" in targets else None
        self.l_v = ones_param((dim,), dtype=dtype) if "v" in targets else None
        self.l_mlp = ones_param((hidden,), dtype=dtype) if "mlp" in targets else None


class _Ia3Attn:
    """Adapter so Attention can always multiply by l_k / l_v (ones when untargeted)."""

    def __init__(self, ia3, dim, dtype):
        one = T.Tensor(np.ones((dim,), dtype=dtype))
        self.l_k = ia3.l_k if ia3.l_k is not None else one
        self.l_v = ia3.l_v if ia3.l_v is not None else one


class Prefix(Module):
    def __init__(self, rng, count, dim, dtype=np.float32):
        self.tokens = Parameter(trunc_normal(rng, (count, dim)).astype(dtype))

    def prepend(self, z):
        *lead, _, d = z.shape
        p = T.broadcast_to(self.tokens, (*lead, self.tokens.shape[0], d))
        return T.concat([p, z], axis=-2)

    def strip(self, z):
        return z[..., self.tokens.shape[0] :, :]


def _component_rngs(seed):
    seqs = np.random.SeedSequence(seed).spawn(4)
    names = ("backbone", "fusion", "decoder", "peft")
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def attach(model, config: PeftConfig, rng, dtype=np.float32):
    """Insert PEFT modules for ``config.method`` into every backbone layer."""
    cfg = model.vit_config
    d = cfg.dim
    hidden = d * cfg.mlp_ratio
    for i, layer in enumerate(model.backbone.layers):
        slot = Module()
        if config.method == "adapter":
            slot.adapter = Adapter(rng, d, bottleneck_dim(d, config.r), config.s, dtype=dtype)
            layer._adapter = slot.adapter
        elif config.method == "lora":
            for t in LORA_TARGETS:
                if t in config.lora_targets:
                    pair = LoraPair(rng, d, d, config.rank, dtype=dtype)
                    setattr(slot, f"lora_{t}", pair)
                    layer.attn._lora[t] = pair
        elif config.method == "ia3":
            slot.ia3 = Ia3(d, hidden, config.ia3_targets, dtype=dtype)
            layer.attn._ia3 = _Ia3Attn(slot.ia3, d, dtype)
            if slot.ia3.l_mlp is not None:
                layer.mlp._hidden_scale = slot.ia3.l_mlp
        elif config.method == "prefix":
            slot.prefix = Prefix(rng, config.prefix_len, d, dtype=dtype)
            layer._prefix = slot.prefix
        else:
            continue
        setattr(model.peft, f"layer{i}", slot)


def build_model(vit_config: ViTConfig, peft_config: PeftConfig, seed=0, num_frames=2, dtype=np.float32):
    """Build a change detector with the requested tuning method.

    The backbone is frozen for every method except ``full``. Component weights
    come from independent seed streams, so two models built with the same seed
    share backbone, fusion and decoder weights regardless of the method.
    """
    vit_config.validate()
    peft_config.validate()
    rngs = _component_rngs(seed)
    model = ChangeDetector(vit_config, rngs, num_frames=num_frames, dtype=dtype)
    attach(model, peft_config, rngs["peft"], dtype=dtype)
    model.method = peft_config.method
    model.backbone.freeze(peft_config.method != "full")
    model.assign_names()
    return model


def merge_lora(model):
    """Fold every LoRA update into its base weight and detach the LoRA hooks.

    Mutates ``model``; intended for verification and export.
    """
    for layer in model.backbone.layers:
        attn = layer.attn
        for t, pair in list(attn._lora.items()):
            w = getattr(attn, "w" + t)
            w.data = w.data + pair.delta()
            del attn._lora[t]
    return model


def partition_report(model):
    frozen = sum(p.size for p in model.parameters() if p.frozen)
    trainable = sum(p.size for p in model.parameters() if not p.frozen)
    total = frozen + trainable
    return {
        "method": model.method,
        "frozen_count": int(frozen),
        "trainable_count": int(trainable),
        "peft_count": int(sum(p.size for p in model.peft.parameters())),
        "ratio": trainable / total if total else 0.0,
    }
