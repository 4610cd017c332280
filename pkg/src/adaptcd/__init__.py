"""Parameter-efficient change detection with a frozen plain ViT, in numpy.

The pieces compose as ``frames -> ViTBackbone (+ PEFT hooks) -> McaBlock ->
Decoder -> logits``; :func:`build_model` assembles them for one tuning method.
"""

from .data import ChangeSample, SynthSpec, generate_synthetic, load_dataset
from .model import ChangeDetector
from .peft import METHODS, PeftConfig, build_model, merge_lora, partition_report
from .tensor import Tensor, no_grad
from .train import AdamW, MetricReport, TrainConfig, compute_metrics, evaluate, train
from .vit import ViTConfig

__all__ = [
    "METHODS",
    "AdamW",
    "ChangeDetector",
    "ChangeSample",
    "MetricReport",
    "PeftConfig",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "ViTConfig",
    "build_model",
    "compute_metrics",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "merge_lora",
    "no_grad",
    "partition_report",
    "train",
]
