"""Bitemporal samples: on-disk layout, loading, augmentation, splitting and
a deterministic synthetic generator.

Dataset layout::

    root/A/<id>.ppm      frame at time 1 (P6)
    root/B/<id>.ppm      frame at time 2 (P6)
    root/label/<id>.pgm  change mask (P5, nonzero = changed)
    root/manifest.json   {"samples": [{"id": ..., "split": ...}, ...]}
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netpbm


@dataclass
class ChangeSample:
    image_a: np.ndarray  # [3, H, W] in [0, 1]
    image_b: np.ndarray
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape or self.image_a.shape[1:] != self.mask.shape:
            raise ValueError(
                f"sample {self.id!r}: size mismatch A{self.image_a.shape[1:]} "
                f"B{self.image_b.shape[1:]} mask{self.mask.shape}"
            )

    @property
    def frames(self):
        return np.stack([self.image_a, self.image_b])


class DatasetError(ValueError):
    pass


# ------------------------------------------------------------------ synthetic
@dataclass
class Shape:
    kind: str  # "rectangle" | "disc"
    cy: float
    cx: float
    size: float  # half-extent (rectangle: half height), radius for a disc
    size2: float  # rectangle half width; unused for discs
    color: tuple

    def cover(self, h, w):
        yy, xx = np.mgrid[0:h, 0:w]
        yy = yy + 0.5
        xx = xx + 0.5
        if self.kind == "disc":
            return (yy - self.cy) ** 2 + (xx - self.cx) ** 2 <= self.size**2
        return (np.abs(yy - self.cy) <= self.size) & (np.abs(xx - self.cx) <= self.size2)


@dataclass
class SynthSpec:
    count: int = 250
    image_size: int = 64
    kinds: list = field(default_factory=lambda: ["rectangle", "disc"])
    shapes_per_frame: tuple = (2, 4)
    size_range: tuple = (6.0, 14.0)  # half-extent / radius in pixels
    change_prob: float = 0.5
    recolor_prob: float = 0.2
    noise: float = 0.05
    test_count: int = 50
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.3, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    tex = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        tex += rng.uniform(0.02, 0.06) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return np.clip(base + tint[:, None, None] + tex[None], 0.0, 1.0)


def _color(rng):
    return colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))


def _random_shape(rng, spec, occupied):
    size = spec.image_size
    lo, hi = spec.size_range
    for _ in range(50):
        kind = spec.kinds[rng.integers(len(spec.kinds))]
        a, b = rng.uniform(lo, hi, size=2)
        if kind == "disc":
            b = a
        cy = rng.uniform(a, size - a)
        cx = rng.uniform(b, size - b)
        shape = Shape(kind, cy, cx, a, b, _color(rng))
        cov = shape.cover(size, size)
        if not (cov & occupied).any():
            return shape, cov
    return None, None


def render(background, shapes):
    """Paint ``shapes`` over ``background [3, H, W]``; returns (image, shape-id map).

    The id map holds -1 for background, otherwise the index into ``shapes``
    of the shape covering the pixel (later shapes on top).
    """
    img = background.copy()
    _, h, w = img.shape
    ids = np.full((h, w), -1, dtype=np.int64)
    for k, s in enumerate(shapes):
        cov = s.cover(h, w)
        img[:, cov] = np.asarray(s.color)[:, None]
        ids[cov] = k
    return img, ids


def change_mask(shapes_a, ids_a, shapes_b, ids_b, keys_a, keys_b):
    """Pixels whose covering shape identity differs between frames.

    ``keys_*`` map a frame-local shape index to a persistent identity, so a
    recoloured shape keeps its identity and does not count as change.
    """
    ka = np.where(ids_a >= 0, np.asarray(keys_a + [-1])[ids_a], -1)
    kb = np.where(ids_b >= 0, np.asarray(keys_b + [-1])[ids_b], -1)
    return (ka != kb).astype(np.uint8)


def synth_pair(rng, spec):
    """One clean (noise-free) bitemporal pair plus its change mask."""
    size = spec.image_size
    bg = _background(rng, size)
    occupied = np.zeros((size, size), dtype=bool)
    shapes_a = []
    n = rng.integers(spec.shapes_per_frame[0], spec.shapes_per_frame[1] + 1)
    for _ in range(n):
        s, cov = _random_shape(rng, spec, occupied)
        if s is not None:
            shapes_a.append(s)
            occupied |= cov
    keys_a = list(range(len(shapes_a)))
    shapes_b, keys_b = [], []
    for key, s in zip(keys_a, shapes_a):
        if rng.uniform() < spec.change_prob:
            continue  # removed
        if rng.uniform() < spec.recolor_prob:
            s = Shape(s.kind, s.cy, s.cx, s.size, s.size2, _color(rng))
        shapes_b.append(s)
        keys_b.append(key)
    next_key = len(shapes_a)
    for _ in range(spec.shapes_per_frame[1]):
        if rng.uniform() < spec.change_prob / 2:
            s, cov = _random_shape(rng, spec, occupied)
            if s is not None:
                shapes_b.append(s)
                keys_b.append(next_key)
                next_key += 1
                occupied |= cov
    img_a, ids_a = render(bg, shapes_a)
    img_b, ids_b = render(bg, shapes_b)
    return img_a, img_b, change_mask(shapes_a, ids_a, shapes_b, ids_b, keys_a, keys_b)


def generate_samples(spec: SynthSpec):
    """In-memory synthetic dataset: list of (ChangeSample, split) pairs.

    Pixel values are quantized to 8 bits so that what is written to disk is
    exactly what is returned here.
    """
    out = []
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.count)
    n_train = spec.count - spec.test_count
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        a, b, mask = synth_pair(rng, spec)
        a = quantize(np.clip(a + rng.normal(0.0, spec.noise, a.shape), 0.0, 1.0))
        b = quantize(np.clip(b + rng.normal(0.0, spec.noise, b.shape), 0.0, 1.0))
        sid = f"{i:05d}"
        out.append((ChangeSample(a, b, mask, sid), "train" if i < n_train else "test"))
    return out


def quantize(x):
    return np.round(np.asarray(x) * 255.0) / 255.0


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic(spec: SynthSpec, root):
    """Write the synthetic dataset to ``root``; returns the manifest dict."""
    for sub in ("A", "B", "label"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    entries = []
    for sample, split in generate_samples(spec):
        save_sample(root, sample)
        entries.append({"id": sample.id, "split": split})
    manifest = {"samples": entries, "synth": spec.to_dict()}
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def save_sample(root, sample):
    netpbm.write(os.path.join(root, "A", f"{sample.id}.ppm"), to_uint8(sample.image_a).transpose(1, 2, 0))
    netpbm.write(os.path.join(root, "B", f"{sample.id}.ppm"), to_uint8(sample.image_b).transpose(1, 2, 0))
    netpbm.write(os.path.join(root, "label", f"{sample.id}.pgm"), (sample.mask > 0).astype(np.uint8) * 255)


# -------------------------------------------------------------------- loading
def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    if os.path.exists(path):
        with open(path) as f:
            return json.load(f)
    ids = sorted(os.path.splitext(n)[0] for n in os.listdir(os.path.join(root, "A")))
    return {"samples": [{"id": i, "split": "train"} for i in ids]}


def load_sample(root, sid):
    paths = [
        os.path.join(root, "A", f"{sid}.ppm"),
        os.path.join(root, "B", f"{sid}.ppm"),
        os.path.join(root, "label", f"{sid}.pgm"),
    ]
    for p in paths:
        if not os.path.exists(p):
            raise DatasetError(f"sample {sid!r}: missing {p}")
    a = netpbm.read(paths[0])
    b = netpbm.read(paths[1])
    m = netpbm.read(paths[2])
    if a.ndim != 3 or b.ndim != 3:
        raise DatasetError(f"sample {sid!r}: frames must be RGB")
    if m.ndim == 3:
        m = m.max(axis=2)
    if not (a.shape[:2] == b.shape[:2] == m.shape):
        raise DatasetError(f"sample {sid!r}: size mismatch A{a.shape[:2]} B{b.shape[:2]} label{m.shape}")
    return ChangeSample(
        a.transpose(2, 0, 1) / 255.0,
        b.transpose(2, 0, 1) / 255.0,
        (m > 0).astype(np.uint8),
        sid,
    )


def load_dataset(root, split=None):
    """Load every sample (or only those tagged ``split``) from ``root``."""
    manifest = read_manifest(root)
    entries = manifest["samples"]
    if split is not None:
        entries = [e for e in entries if e.get("split") == split]
    return [load_sample(root, e["id"]) for e in entries]


# ----------------------------------------------------------- augment / split
def augment(sample: ChangeSample, rng, crop_size=None, flips=True):
    """Random crop plus horizontal/vertical flips, applied identically to all three arrays."""
    _, h, w = sample.image_a.shape
    crop = crop_size or min(h, w)
    if crop > h or crop > w:
        raise ValueError(f"crop size {crop} exceeds image size {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    hflip = bool(rng.integers(2)) if flips else False
    vflip = bool(rng.integers(2)) if flips else False
    return apply_transform(sample, top, left, crop, hflip, vflip)


def apply_transform(sample, top, left, crop, hflip, vflip):
    def tf(x):
        x = x[..., top : top + crop, left : left + crop]
        if hflip:
            x = x[..., :, ::-1]
        if vflip:
            x = x[..., ::-1, :]
        return np.ascontiguousarray(x)

    return ChangeSample(tf(sample.image_a), tf(sample.image_b), tf(sample.mask), sample.id)


def split_dataset(items, ratio=0.2, seed=0):
    """Deterministic shuffled split into (train, val) with |val| = round(ratio * n)."""
    if not 0 < ratio < 1:
        raise ValueError("split ratio must lie in (0, 1)")
    items = list(items)
    n = len(items)
    if n < 2:
        raise ValueError("need at least two items to split")
    n_val = int(round(ratio * n))
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [items[i] for i in range(n) if i not in val_idx]
    val = [items[i] for i in range(n) if i in val_idx]
    return train, val
