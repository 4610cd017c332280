"""Loss, optimizer, metrics and the train / evaluate loops."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import augment

log = logging.getLogger(__name__)

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
JACCARD_EPS = 1e-7


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr: float = 4e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    crop_size: int = 0  # 0 -> full image
    val_split: float = 0.2
    seed: int = 0
    eval_batch_size: int = 32

    def validate(self):
        for key in ("batch_size", "epochs", "eval_batch_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not 0 < self.val_split < 1:
            raise ValueError("val_split must lie in (0, 1)")
        return self

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------- loss
def focal_jaccard_loss(logits, target):
    """Focal loss (gamma=2, alpha=0.25 on the changed class) plus soft Jaccard loss.

    ``logits`` is ``[2, H, W]`` or ``[B, 2, H, W]``; ``target`` the matching
    binary mask. The focal term is a mean over pixels; the Jaccard term is one
    soft IoU over all pixels of the batch.
    """
    target = np.asarray(target)
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target mask must be binary")
    y = target.astype(logits.dtype)
    if logits.ndim == 3:
        logits = T.expand_dims(logits, 0)
        y = y[None]
    logp = T.log_softmax(logits, axis=1)
    logp1 = logp[:, 1]
    logp0 = logp[:, 0]
    logpt = logp1 * y + logp0 * (1.0 - y)
    pt = T.exp(logpt)
    alpha = np.where(y > 0, FOCAL_ALPHA, 1.0 - FOCAL_ALPHA).astype(logits.dtype)
    focal = (-(alpha * (1.0 - pt) ** FOCAL_GAMMA) * logpt).mean()
    p = T.exp(logp1)
    inter = (p * y).sum()
    union = p.sum() + float(y.sum()) - inter
    jaccard = 1.0 - (inter + JACCARD_EPS) / (union + JACCARD_EPS)
    return focal + jaccard


# ------------------------------------------------------------------ optimizer
class AdamW:
    """Adam with decoupled weight decay over a fixed set of trainable parameters."""

    def __init__(self, named_params, lr=4e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        named_params = list(named_params)
        frozen = [n for n, p in named_params if p.frozen]
        if frozen:
            raise ValueError(f"frozen parameters passed to optimizer: {frozen[:3]}")
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"no gradient for trainable parameters: {missing[:3]}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in self.params.items():
            if p.frozen:
                raise ValueError(f"parameter {n!r} was frozen after optimizer construction")
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = p.data
            if self.weight_decay:
                data = data - self.lr * self.weight_decay * data
            p.data = (data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_names(self):
        return set(self.m)


# -------------------------------------------------------------------- metrics
@dataclass
class MetricReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def f1(self):
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else 1.0

    @property
    def iou(self):
        d = self.tp + self.fp + self.fn
        return self.tp / d if d else 1.0

    @property
    def oa(self):
        total = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / total if total else 1.0

    def __add__(self, other):
        return MetricReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "f1": self.f1, "iou": self.iou, "oa": self.oa}


def compute_metrics(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return MetricReport(tp, fp, fn, p.size - tp - fp - fn)


def _batches(n, size):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def evaluate(model, samples, batch_size=32):
    """Micro-averaged report: confusion counts summed over every pixel, ratios taken once."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    report = MetricReport(0, 0, 0, 0)
    for sl in _batches(len(samples), batch_size):
        chunk = samples[sl]
        frames = np.stack([s.frames for s in chunk])
        pred = model.predict(frames)
        report = report + compute_metrics(pred, np.stack([s.mask for s in chunk]))
    return report


# ---------------------------------------------------------------------- train
def train(model, train_set, val_set, config: TrainConfig, out_dir=None, on_epoch=None):
    """Train the model's trainable partition; returns the list of epoch records.

    Writes ``log.ndjson`` and ``best.ckpt`` (trainable parameters at the best
    validation F1) into ``out_dir`` when given. On return the model holds the
    best-epoch weights.
    """
    config.validate()
    if not train_set:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(
        model.named_trainable(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    records = []
    best_f1, best_state = -1.0, None
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "log.ndjson"), "w")
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_set))
            losses = []
            for sl in _batches(len(order), config.batch_size):
                batch = [augment(train_set[i], rng, config.crop_size or None) for i in order[sl]]
                frames = np.stack([s.frames for s in batch])
                masks = np.stack([s.mask for s in batch])
                opt.zero_grad()
                loss = focal_jaccard_loss(model(frames), masks)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError(f"non-finite loss {loss.item()} at epoch {epoch}, step {len(losses)}")
                loss.backward()
                opt.step()
                losses.append(loss.item())
            val = evaluate(model, val_set or train_set, config.eval_batch_size)
            rec = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_f1": val.f1,
                "val_iou": val.iou,
                "val_oa": val.oa,
            }
            records.append(rec)
            log.info("epoch %d loss %.4f val_f1 %.4f", epoch, rec["train_loss"], rec["val_f1"])
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if val.f1 > best_f1:
                best_f1 = val.f1
                best_state = {n: p.data.copy() for n, p in model.named_trainable()}
                if out_dir is not None:
                    model.save_checkpoint(os.path.join(out_dir, "best.ckpt"))
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if log_file is not None:
            log_file.close()
    for n, p in model.named_trainable():
        p.data = best_state[n]
    return records
